//! Perplexity-family membership-inference scores and output ranking.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::OutputRecord;
use crate::provider::{LanguageModel, ProviderError};
use crate::Real;

pub const DEFAULT_WINDOW_LINES: usize = 6;
pub const ZLIB_LEVEL: u32 = 6;
/// Lower bound on `ln(P_s)` in the perplexity ratio.
pub const RATIO_GUARD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot score empty text")]
    EmptyText,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// `exp(−mean(logprobs))`.
pub fn perplexity_from_logprobs<T: Real>(logprobs: &[T]) -> Result<T, MetricsError> {
    if logprobs.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let sum = logprobs.iter().fold(T::zero(), |a, &x| a + x);
    let n = T::from_usize(logprobs.len()).expect("length fits");
    Ok((-sum / n).exp())
}

pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, text: &str) -> Result<f64, MetricsError> {
    if text.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let lps: Vec<f64> = model.logprobs(text)?.into_iter().map(|(_, lp)| lp).collect();
    perplexity_from_logprobs(&lps)
}

/// `ln(P_l) / ln(P_s)`, with `ln(P_s)` clamped below at [`RATIO_GUARD`].
pub fn ppl_ppl_ratio_from<T: Real>(ppl_large: T, ppl_small: T) -> T {
    ppl_large.ln() / ppl_small.ln().max(T::of(RATIO_GUARD))
}

pub fn ppl_ppl_ratio<L, S>(large: &L, small: &S, text: &str) -> Result<f64, MetricsError>
where
    L: LanguageModel + ?Sized,
    S: LanguageModel + ?Sized,
{
    Ok(ppl_ppl_ratio_from(perplexity(large, text)?, perplexity(small, text)?))
}

/// Eight times the length of the zlib stream (level 6) of the UTF-8 bytes.
pub fn deflate_bits(text: &str) -> Result<u64, MetricsError> {
    if text.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(text.as_bytes()).expect("writing to memory");
    let bytes = enc.finish().expect("finishing in-memory stream");
    Ok(8 * bytes.len() as u64)
}

/// `ln(P) / bits`.
pub fn ppl_zlib_ratio_from<T: Real>(ppl: T, bits: u64) -> T {
    ppl.ln() / T::from_u64(bits).expect("bit count fits")
}

pub fn ppl_zlib_ratio<M: LanguageModel + ?Sized>(model: &M, text: &str) -> Result<f64, MetricsError> {
    Ok(ppl_zlib_ratio_from(perplexity(model, text)?, deflate_bits(text)?))
}

/// Windows of `window_lines` consecutive lines (newlines kept), stride one
/// line. Shorter texts form one window.
pub fn line_windows(text: &str, window_lines: usize) -> Vec<String> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    if lines.len() <= window_lines {
        return vec![text.to_owned()];
    }
    lines.windows(window_lines).map(|w| w.concat()).collect()
}

/// Arithmetic mean of per-window perplexities; each window is scored on
/// its own, without the preceding text as context.
pub fn avg_window_ppl<M: LanguageModel + ?Sized>(model: &M, text: &str, window_lines: usize) -> Result<f64, MetricsError> {
    if text.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let windows = line_windows(text, window_lines.max(1));
    let mut sum = 0.0;
    for w in &windows {
        sum += perplexity(model, w)?;
    }
    Ok(sum / windows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores<T> {
    pub output_index: usize,
    pub ppl: T,
    pub ppl_large: T,
    pub ppl_small: T,
    pub ppl_ppl_ratio: T,
    pub deflate_bits: u64,
    pub ppl_zlib_ratio: T,
    pub avg_window_ppl: T,
}

impl<T: Real> MetricScores<T> {
    pub fn get(&self, metric: Metric) -> T {
        match metric {
            Metric::Ppl => self.ppl,
            Metric::PplPpl => self.ppl_ppl_ratio,
            Metric::PplZlib => self.ppl_zlib_ratio,
            Metric::AvgWindow => self.avg_window_ppl,
        }
    }
}

/// Models used for scoring: the audited one and the large/small pair.
#[derive(Clone, Copy)]
pub struct Scorers<'a> {
    pub audited: &'a dyn LanguageModel,
    pub large: &'a dyn LanguageModel,
    pub small: &'a dyn LanguageModel,
    pub window_lines: usize,
}

pub fn score_text(s: &Scorers<'_>, text: &str, output_index: usize) -> Result<MetricScores<f64>, MetricsError> {
    let ppl = perplexity(s.audited, text)?;
    let ppl_large = perplexity(s.large, text)?;
    let ppl_small = perplexity(s.small, text)?;
    let bits = deflate_bits(text)?;
    Ok(MetricScores {
        output_index,
        ppl,
        ppl_large,
        ppl_small,
        ppl_ppl_ratio: ppl_ppl_ratio_from(ppl_large, ppl_small),
        deflate_bits: bits,
        ppl_zlib_ratio: ppl_zlib_ratio_from(ppl, bits),
        avg_window_ppl: avg_window_ppl(s.audited, text, s.window_lines)?,
    })
}

/// Scores every non-empty output in parallel, in index order. Empty
/// outputs are skipped with a warning.
pub fn score_batch(s: &Scorers<'_>, outputs: &[OutputRecord]) -> Result<Vec<MetricScores<f64>>, MetricsError> {
    let skipped = outputs.iter().filter(|o| o.text.is_empty()).count();
    if skipped > 0 {
        log::warn!("{skipped} empty output(s) are not scored");
    }
    outputs.par_iter().filter(|o| !o.text.is_empty()).map(|o| score_text(s, &o.text, o.index)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ppl,
    PplPpl,
    PplZlib,
    AvgWindow,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ppl, Metric::PplPpl, Metric::PplZlib, Metric::AvgWindow];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ppl => "ppl",
            Metric::PplPpl => "ppl_ppl",
            Metric::PplZlib => "ppl_zlib",
            Metric::AvgWindow => "avg_window",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| MetricsError::UnknownMetric(s.to_owned()))
    }
}

/// Outputs in ascending score order, ties by output index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList<T> {
    pub metric: Metric,
    pub entries: Vec<(usize, T)>,
}

pub fn rank_outputs<T: Real>(scores: &[MetricScores<T>], metric: Metric) -> RankedList<T> {
    let mut entries: Vec<(usize, T)> = scores.iter().map(|s| (s.output_index, s.get(metric))).collect();
    entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    RankedList { metric, entries }
}

/// Fraction of the first `k` ranked outputs that are memorized. When `k`
/// exceeds the list, the whole list is used.
pub fn topk_memorization_rate<T>(ranked: &RankedList<T>, memorized: &HashSet<usize>, k: usize) -> f64 {
    if k > ranked.entries.len() {
        log::warn!("top-{k} requested from {} ranked outputs; using all", ranked.entries.len());
    }
    let n = k.min(ranked.entries.len());
    if n == 0 {
        return 0.0;
    }
    ranked.entries[..n].iter().filter(|(i, _)| memorized.contains(i)).count() as f64 / n as f64
}

pub fn write_scores_csv<W: Write, T: Real>(scores: &[MetricScores<T>], mut out: W) -> io::Result<()> {
    writeln!(out, "output_index,ppl,ppl_large,ppl_small,ppl_ppl_ratio,deflate_bits,ppl_zlib_ratio,avg_window_ppl")?;
    for s in scores {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.output_index, s.ppl, s.ppl_large, s.ppl_small, s.ppl_ppl_ratio, s.deflate_bits, s.ppl_zlib_ratio, s.avg_window_ppl
        )?;
    }
    out.flush()
}

/// Reads back what [`write_scores_csv`] wrote.
pub fn read_scores_csv<R: BufRead>(input: R) -> io::Result<Vec<MetricScores<f64>>> {
    let bad = |line: usize, why: &str| io::Error::new(io::ErrorKind::InvalidData, format!("scores line {line}: {why}"));
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if n == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(n + 1, "expected 8 fields"));
        }
        let real = |i: usize| f[i].parse::<f64>().map_err(|e| bad(n + 1, &e.to_string()));
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| bad(n + 1, &e.to_string()));
        out.push(MetricScores {
            output_index: int(0)? as usize,
            ppl: real(1)?,
            ppl_large: real(2)?,
            ppl_small: real(3)?,
            ppl_ppl_ratio: real(4)?,
            deflate_bits: int(5)?,
            ppl_zlib_ratio: real(6)?,
            avg_window_ppl: real(7)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusRole, Document};
    use crate::provider::{ModelMeta, ProviderHandle, TokenDistribution};
    use crate::refmodel::NGramModel;
    use crate::TokenId;
    use std::sync::Arc;

    fn builtin(texts: &[&str], order: usize) -> ProviderHandle {
        let docs = texts.iter().enumerate().map(|(i, t)| Document::new(format!("{i}"), t, "t")).collect();
        let c = Corpus::from_documents(docs, CorpusRole::Training).unwrap();
        ProviderHandle::builtin(Arc::new(NGramModel::train(&c, order, 0.4).unwrap()), "t")
    }

    /// Scores every token with a fixed log-probability.
    struct Fixed(f64, ModelMeta);

    impl Fixed {
        fn new(lp: f64) -> Self {
            Fixed(lp, ModelMeta { model_label: "fixed".into(), vocab_size: 4, bos_id: 0, eos_id: 1, max_context: 8 })
        }
    }

    impl LanguageModel for Fixed {
        fn meta(&self) -> &ModelMeta {
            &self.1
        }
        fn next_distribution(&self, _: &[TokenId], _: usize) -> Result<TokenDistribution<f64>, ProviderError> {
            unimplemented!()
        }
        fn logprobs(&self, text: &str) -> Result<Vec<(String, f64)>, ProviderError> {
            Ok(text.chars().map(|c| (c.to_string(), self.0)).collect())
        }
        fn encode(&self, _: &str) -> Result<Vec<TokenId>, ProviderError> {
            unimplemented!()
        }
        fn decode(&self, _: &[TokenId]) -> Result<String, ProviderError> {
            unimplemented!()
        }
    }

    #[test]
    fn perplexity_closed_forms() {
        assert_eq!(perplexity(&Fixed::new(0.0), "abc").unwrap(), 1.0);
        assert!((perplexity(&Fixed::new(0.5f64.ln()), "abc").unwrap() - 2.0).abs() < 1e-12);
        assert!(perplexity(&Fixed::new(0.0), "").is_err());
        assert!((perplexity_from_logprobs(&[0.25f32.ln(); 3]).unwrap() - 4.0).abs() < 1e-5);
    }

    #[test]
    fn uniform_model_has_vocabulary_perplexity() {
        let words: Vec<String> = (0..34).map(|i| format!("w{i:02}")).collect();
        let vocab = crate::refmodel::Vocabulary::from_tokens(words.iter().cloned());
        assert_eq!(vocab.len(), 37);
        let all: Vec<(TokenId, u32)> = (0..37).map(|t| (t, 1)).collect();
        let m = NGramModel::from_counts(vocab, 1, 0.4, [(vec![], all)]).unwrap();
        let h = ProviderHandle::builtin(Arc::new(m), "uniform");
        for text in ["w00", "w03w07w33", "zzz w01\n"] {
            assert!((perplexity(&h, text).unwrap() - 37.0).abs() < 1e-6, "{text}");
        }
    }

    #[test]
    fn deterministic_model_has_unit_perplexity() {
        let m = builtin(&["alpha beta gamma\n"], 3);
        assert!((perplexity(&m, "alpha beta gamma\n").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ppl_ppl_ratio_from(3.0, 3.0), 1.0);
        assert!((ppl_ppl_ratio_from(2.0f64, 4.0) - 0.5).abs() < 1e-15);
        assert_eq!(ppl_ppl_ratio_from(2.0f64, 1.0), 2f64.ln() / RATIO_GUARD);
    }

    #[test]
    fn deflate_examples() {
        let runs = deflate_bits(&"a".repeat(1000)).unwrap();
        let mut state = 0x1234_5678_u32;
        let noisy: String = (0..1000)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 17;
                state ^= state << 5;
                char::from(b' ' + (state % 94) as u8)
            })
            .collect();
        assert!(runs < deflate_bits(&noisy).unwrap());
        assert!(deflate_bits("").is_err());
        // Regression value: 2-byte header, 12-byte deflate body, 4-byte Adler-32.
        assert_eq!(deflate_bits("hello world\n").unwrap(), 160);
    }

    #[test]
    fn window_counts() {
        let six = "a\nb\nc\nd\ne\nf\n";
        assert_eq!(line_windows(six, 6).len(), 1);
        assert_eq!(line_windows("a\nb\nc\nd\ne\nf\ng\nh\n", 6).len(), 3);
        assert_eq!(line_windows("a\nb", 6), vec!["a\nb".to_owned()]);
        let m = builtin(&[six], 3);
        assert_eq!(avg_window_ppl(&m, six, 6).unwrap(), perplexity(&m, six).unwrap());
    }

    #[test]
    fn ranking_is_total() {
        let mk = |i, v| MetricScores {
            output_index: i,
            ppl: v,
            ppl_large: v,
            ppl_small: v,
            ppl_ppl_ratio: v,
            deflate_bits: 8,
            ppl_zlib_ratio: v,
            avg_window_ppl: v,
        };
        let scores = vec![mk(3, 2.0), mk(1, 1.0), mk(0, 2.0), mk(2, 1.5)];
        let r = rank_outputs(&scores, Metric::Ppl);
        assert_eq!(r.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2, 0, 3]);
        let all: HashSet<usize> = (0..4).collect();
        assert_eq!(topk_memorization_rate(&r, &all, 2), 1.0);
        assert_eq!(topk_memorization_rate(&r, &HashSet::new(), 2), 0.0);
        assert_eq!(topk_memorization_rate(&r, &[1].into_iter().collect(), 100), 0.25);
    }

    #[test]
    fn scores_csv_round_trips() {
        let s = MetricScores {
            output_index: 7,
            ppl: 1.0 / 3.0,
            ppl_large: 12.5,
            ppl_small: 1e-300,
            ppl_ppl_ratio: -0.1,
            deflate_bits: 160,
            ppl_zlib_ratio: 2.0f64.sqrt(),
            avg_window_ppl: 3.0,
        };
        let mut buf = Vec::new();
        write_scores_csv(&[s.clone(), MetricScores { output_index: 9, ..s.clone() }], &mut buf).unwrap();
        let back = read_scores_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![s.clone(), MetricScores { output_index: 9, ..s }]);
        assert!(read_scores_csv(&b"header\n1,2\n"[..]).is_err());
    }

    #[test]
    fn metric_names() {
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }
}
