use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::GenerateError;
use crate::clonedetect::MemorizedSegment;
use crate::corpus::{Corpus, CorpusRole};

/// A function-definition statement lifted from a held-out file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionPrompt {
    pub doc_id: String,
    /// 0-based line of the first prompt line (a decorator, if any).
    pub line: usize,
    pub text: String,
}

fn is_def(line: &str) -> bool {
    line.trim_start().starts_with("def ")
}

/// All definition statements of one text: decorators directly above a
/// `def ` line, then lines through the first one ending in `:`.
pub fn find_definitions(text: &str) -> Vec<(usize, String)> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if !is_def(lines[i]) {
            i += 1;
            continue;
        }
        let mut start = i;
        while start > 0 && lines[start - 1].trim_start().starts_with('@') {
            start -= 1;
        }
        let end = (i..lines.len()).find(|&j| lines[j].trim_end().ends_with(':'));
        match end {
            Some(end) => {
                out.push((start, lines[start..=end].join("\n")));
                i = end + 1;
            }
            None => break,
        }
    }
    out
}

/// Samples `count` definition statements uniformly without replacement;
/// the result is in corpus order. Returns everything found (with a warning)
/// when fewer than `count` exist.
pub fn extract_pcg_prompts<R: RngCore + ?Sized>(
    heldout: &Corpus,
    count: usize,
    rng: &mut R,
) -> Result<Vec<DefinitionPrompt>, GenerateError> {
    if heldout.role() != CorpusRole::Heldout {
        return Err(GenerateError::InvalidConfig("prompt-conditioned generation needs a held-out corpus".into()));
    }
    if count == 0 {
        return Err(GenerateError::InvalidConfig("prompt count must be at least 1".into()));
    }
    let all: Vec<DefinitionPrompt> = heldout
        .documents()
        .iter()
        .flat_map(|d| {
            find_definitions(&d.text).into_iter().map(|(line, text)| DefinitionPrompt { doc_id: d.id.clone(), line, text })
        })
        .collect();
    if all.len() <= count {
        if all.len() < count {
            log::warn!("requested {count} definition prompts but the held-out corpus has only {}", all.len());
        }
        return Ok(all);
    }
    let mut picked = index::sample(rng, all.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i].clone()).collect())
}

/// The segment with the most output occurrences; ties go to more lines,
/// then to the lexicographically smaller text.
pub fn select_tsg_prompt(prior: &[MemorizedSegment]) -> Result<&MemorizedSegment, GenerateError> {
    prior
        .iter()
        .min_by(|a, b| {
            b.output_occurrences
                .cmp(&a.output_occurrences)
                .then(b.line_count.cmp(&a.line_count))
                .then(a.text.cmp(&b.text))
        })
        .ok_or_else(|| {
            GenerateError::InvalidConfig(
                "two-step generation needs memorized segments; run non-prompt generation and clone detection first".into(),
            )
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heldout(texts: &[&str]) -> Corpus {
        let docs = texts.iter().enumerate().map(|(i, t)| Document::new(format!("h{i}.py"), t, "t")).collect();
        Corpus::from_documents(docs, CorpusRole::Heldout).unwrap()
    }

    #[test]
    fn single_line_definition() {
        assert_eq!(find_definitions("def f(x):\n  return x\n"), vec![(0, "def f(x):".to_owned())]);
    }

    #[test]
    fn multiline_signature() {
        let text = "x = 1\ndef g(a,\n      b):\n    pass\n";
        assert_eq!(find_definitions(text), vec![(1, "def g(a,\n      b):".to_owned())]);
    }

    #[test]
    fn decorators_and_methods() {
        let text = "class A:\n    @staticmethod\n    @cache\n    def h():\n        pass\n";
        assert_eq!(find_definitions(text), vec![(1, "    @staticmethod\n    @cache\n    def h():".to_owned())]);
    }

    #[test]
    fn no_definitions() {
        assert!(find_definitions("print('def x')\nundef = 3\n").is_empty());
        let c = heldout(&["x = 1\n"]);
        assert!(extract_pcg_prompts(&c, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().is_empty());
    }

    #[test]
    fn sampling_without_replacement_is_seeded() {
        let text: String = (0..30).map(|i| format!("def f{i}():\n    return {i}\n")).collect();
        let c = heldout(&[&text]);
        let a = extract_pcg_prompts(&c, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = extract_pcg_prompts(&c, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let mut lines: Vec<usize> = a.iter().map(|p| p.line).collect();
        lines.dedup();
        assert_eq!(lines.len(), 10);
        assert_eq!(extract_pcg_prompts(&c, 50, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().len(), 30);
    }

    #[test]
    fn training_corpus_is_rejected() {
        let c = Corpus::from_documents(vec![Document::new("a", "def f():\n", "t")], CorpusRole::Training).unwrap();
        assert!(extract_pcg_prompts(&c, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn seg(text: &str, lines: usize, occ: usize) -> MemorizedSegment {
        MemorizedSegment {
            segment_id: crate::clonedetect::segment_id(text),
            text: text.to_owned(),
            line_count: lines,
            training_locations: vec![],
            output_occurrences: occ,
        }
    }

    #[test]
    fn tsg_prefers_most_frequent_then_longest() {
        let s = [seg("a", 6, 3), seg("b", 6, 7)];
        assert_eq!(select_tsg_prompt(&s).unwrap().text, "b");
        let s = [seg("short", 6, 5), seg("long", 8, 5)];
        assert_eq!(select_tsg_prompt(&s).unwrap().text, "long");
        let s = [seg("zz", 6, 5), seg("aa", 6, 5)];
        assert_eq!(select_tsg_prompt(&s).unwrap().text, "aa");
        assert_eq!(select_tsg_prompt(&s[..1]).unwrap().text, "zz");
        assert!(select_tsg_prompt(&[]).is_err());
    }
}
