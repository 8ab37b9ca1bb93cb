use std::collections::HashMap;

use rayon::prelude::*;
use xxhash_rust::xxh3::Xxh3;

use crate::corpus::Corpus;

pub const DEFAULT_WINDOW_LINES: usize = 6;
pub const DEFAULT_SHARDS: usize = 53;

/// Lines that count toward the window size: anything not blank after trimming.
pub fn is_significant(line: &str) -> bool {
    !line.trim().is_empty()
}

/// Indices of the significant lines of `lines`.
pub fn significant_lines<S: AsRef<str>>(lines: &[S]) -> Vec<u32> {
    lines.iter().enumerate().filter(|(_, l)| is_significant(l.as_ref())).map(|(i, _)| i as u32).collect()
}

/// 64-bit content hash of the given lines joined with `'\n'`.
pub fn hash_lines<'a, I>(lines: I) -> u64
where
    I: IntoIterator<Item = &'a str>,
{
    let mut h = Xxh3::new();
    for (i, l) in lines.into_iter().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(l.as_bytes());
    }
    h.digest()
}

/// Hashes of every window of `window` consecutive significant lines, paired
/// with the line index where the window starts.
pub fn window_hashes<S: AsRef<str>>(lines: &[S], sig: &[u32], window: usize) -> Vec<(u64, u32)> {
    if sig.len() < window {
        return Vec::new();
    }
    (0..=sig.len() - window)
        .map(|j| {
            let h = hash_lines(sig[j..j + window].iter().map(|&i| lines[i as usize].as_ref()));
            (h, sig[j])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Posting {
    /// Position of the document within the corpus.
    pub doc: u32,
    /// Line where the window's first significant line sits.
    pub line: u32,
}

/// Window-hash table over a corpus, sharded by `hash % shards`.
#[derive(Debug, Clone)]
pub struct FingerprintIndex {
    window_lines: usize,
    shards: Vec<HashMap<u64, Vec<Posting>>>,
    windows: usize,
    documents: usize,
    total_lines: usize,
    built_from: String,
}

impl FingerprintIndex {
    /// Indexes every window of `window_lines` significant lines.
    ///
    /// # Panics
    /// If `window_lines < 2` or `shards == 0`.
    pub fn build(corpus: &Corpus, window_lines: usize, shards: usize) -> Self {
        assert!(window_lines >= 2, "window_lines must be at least 2");
        assert!(shards >= 1, "need at least one shard");
        let docs = corpus.documents();
        let chunk = docs.len().div_ceil(shards).max(1);
        // Per chunk of documents, postings bucketed by shard.
        let partial: Vec<Vec<Vec<(u64, Posting)>>> = docs
            .par_chunks(chunk)
            .enumerate()
            .map(|(c, group)| {
                let mut buckets: Vec<Vec<(u64, Posting)>> = vec![Vec::new(); shards];
                for (k, d) in group.iter().enumerate() {
                    let doc = (c * chunk + k) as u32;
                    let sig = significant_lines(&d.lines);
                    for (h, line) in window_hashes(&d.lines, &sig, window_lines) {
                        buckets[(h % shards as u64) as usize].push((h, Posting { doc, line }));
                    }
                }
                buckets
            })
            .collect();
        let tables: Vec<HashMap<u64, Vec<Posting>>> = (0..shards)
            .into_par_iter()
            .map(|s| {
                let mut table: HashMap<u64, Vec<Posting>> = HashMap::new();
                for buckets in &partial {
                    for &(h, p) in &buckets[s] {
                        table.entry(h).or_default().push(p);
                    }
                }
                table
            })
            .collect();
        let windows = tables.iter().flat_map(|t| t.values()).map(Vec::len).sum();
        Self {
            window_lines,
            shards: tables,
            windows,
            documents: docs.len(),
            total_lines: corpus.total_lines(),
            built_from: corpus.digest(),
        }
    }

    pub fn window_lines(&self) -> usize {
        self.window_lines
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    /// Total number of indexed windows.
    pub fn window_count(&self) -> usize {
        self.windows
    }

    pub fn distinct_keys(&self) -> usize {
        self.shards.iter().map(HashMap::len).sum()
    }

    /// Digest of the corpus this index was built from.
    pub fn built_from(&self) -> &str {
        &self.built_from
    }

    pub fn postings(&self, hash: u64) -> &[Posting] {
        self.shards[(hash % self.shards.len() as u64) as usize].get(&hash).map_or(&[], Vec::as_slice)
    }

    /// Cheap shape check against a corpus; [`built_from`](Self::built_from)
    /// gives the full digest comparison.
    pub fn matches_shape(&self, corpus: &Corpus) -> bool {
        self.documents == corpus.len() && self.total_lines == corpus.total_lines()
    }

    /// Every `(hash, posting)` pair, for invariant checks.
    pub fn entries(&self) -> impl Iterator<Item = (u64, Posting)> + '_ {
        self.shards.iter().flat_map(|t| t.iter().flat_map(|(&h, ps)| ps.iter().map(move |&p| (h, p))))
    }
}
