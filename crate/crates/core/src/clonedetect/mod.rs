//! Type-1 clone detection between model outputs and the training corpus.
//!
//! A match is a run of verbatim-identical lines holding at least `L`
//! significant (non-blank) lines. Blank lines never count toward `L` but
//! must still match inside a span. Lines are 0-based and spans are
//! half-open `[start, end)`.

mod index;

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

pub use index::{
    hash_lines, is_significant, significant_lines, window_hashes, FingerprintIndex, Posting, DEFAULT_SHARDS,
    DEFAULT_WINDOW_LINES,
};

use crate::corpus::{Corpus, CorpusRole, Document};
use crate::generate::OutputRecord;

/// Lines of `text` without the empty remainder after a final newline.
pub fn content_lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if text.is_empty() || text.ends_with('\n') {
        lines.pop();
    }
    lines
}

fn doc_lines(d: &Document) -> &[String] {
    &d.lines[..d.line_count()]
}

/// Hex form of the 64-bit content hash of a segment text.
pub fn segment_id(text: &str) -> String {
    format!("{:016x}", xxh3_64(text.as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainingLocation {
    pub doc_id: String,
    pub start_line: usize,
}

/// A maximal verbatim span shared by an output and the training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorizedSegment {
    pub segment_id: String,
    /// The span's lines joined with `'\n'` (no trailing newline).
    pub text: String,
    pub line_count: usize,
    /// Every corpus position holding `text`, in corpus order.
    pub training_locations: Vec<TrainingLocation>,
    /// Verbatim occurrences of `text` across the audited batch.
    pub output_occurrences: usize,
}

impl MemorizedSegment {
    fn from_lines(lines: &[&str], training_locations: Vec<TrainingLocation>) -> Self {
        let text = lines.join("\n");
        Self { segment_id: segment_id(&text), text, line_count: lines.len(), training_locations, output_occurrences: 1 }
    }

    pub fn lines(&self) -> Vec<&str> {
        self.text.split('\n').collect()
    }

    pub fn training_count(&self) -> usize {
        self.training_locations.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneMatch {
    pub output_index: usize,
    pub output_span: (usize, usize),
    pub segment_id: String,
}

/// Maximal diagonal run: output lines `[o_start, o_end)` equal corpus
/// document `doc` from line `c_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    o_start: usize,
    o_end: usize,
    doc: u32,
    c_start: usize,
}

/// All maximal matching blocks of `out` against the corpus.
fn blocks(index: &FingerprintIndex, corpus: &Corpus, out: &[&str]) -> Vec<Block> {
    let l = index.window_lines();
    let sig = significant_lines(out);
    let mut found = Vec::new();
    let mut seen: HashMap<(u32, i64), Vec<(usize, usize)>> = HashMap::new();
    if sig.len() < l {
        return found;
    }
    for j in 0..=sig.len() - l {
        let o = sig[j] as usize;
        let width = sig[j + l - 1] as usize + 1 - o;
        let h = hash_lines(sig[j..j + l].iter().map(|&i| out[i as usize]));
        for p in index.postings(h) {
            let c = p.line as usize;
            let diag = (p.doc, c as i64 - o as i64);
            if seen.get(&diag).is_some_and(|rs| rs.iter().any(|&(s, e)| s <= o && o < e)) {
                continue;
            }
            let d = doc_lines(&corpus.documents()[p.doc as usize]);
            if c + width > d.len() || (0..width).any(|i| out[o + i] != d[c + i]) {
                continue;
            }
            let (mut s, mut cs) = (o, c);
            while s > 0 && cs > 0 && out[s - 1] == d[cs - 1] {
                s -= 1;
                cs -= 1;
            }
            let (mut e, mut ce) = (o + width, c + width);
            while e < out.len() && ce < d.len() && out[e] == d[ce] {
                e += 1;
                ce += 1;
            }
            seen.entry(diag).or_default().push((s, e));
            found.push(Block { o_start: s, o_end: e, doc: p.doc, c_start: cs });
        }
    }
    found
}

/// Clones of one output text. Spans are reported once each, and a span is
/// dropped when another reported span strictly contains it.
pub fn find_clones_in_text(
    index: &FingerprintIndex,
    corpus: &Corpus,
    text: &str,
    output_index: usize,
) -> Vec<(CloneMatch, MemorizedSegment)> {
    debug_assert!(index.matches_shape(corpus), "index was built from another corpus");
    let out = content_lines(text);
    let mut by_range: HashMap<(usize, usize), Vec<(u32, usize)>> = HashMap::new();
    for b in blocks(index, corpus, &out) {
        by_range.entry((b.o_start, b.o_end)).or_default().push((b.doc, b.c_start));
    }
    let mut ranges: Vec<(usize, usize)> = by_range.keys().copied().collect();
    ranges.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut max_end = 0;
    let mut result = Vec::new();
    for (i, &(s, e)) in ranges.iter().enumerate() {
        if i > 0 && max_end >= e {
            continue;
        }
        max_end = max_end.max(e);
        let mut locs = by_range.remove(&(s, e)).expect("range present");
        locs.sort_unstable();
        let docs = corpus.documents();
        let locations =
            locs.into_iter().map(|(d, c)| TrainingLocation { doc_id: docs[d as usize].id.clone(), start_line: c }).collect();
        let seg = MemorizedSegment::from_lines(&out[s..e], locations);
        result.push((CloneMatch { output_index, output_span: (s, e), segment_id: seg.segment_id.clone() }, seg));
    }
    result
}

pub fn find_clones(index: &FingerprintIndex, output: &OutputRecord, corpus: &Corpus) -> Vec<(CloneMatch, MemorizedSegment)> {
    find_clones_in_text(index, corpus, &output.text, output.index)
}

/// Merges per-output segments by content hash, summing output occurrences.
/// Ordered by occurrences (descending), then segment id.
pub fn dedupe_segments<I>(segments: I) -> Vec<MemorizedSegment>
where
    I: IntoIterator<Item = MemorizedSegment>,
{
    let mut merged: HashMap<String, MemorizedSegment> = HashMap::new();
    for s in segments {
        match merged.get_mut(&s.segment_id) {
            Some(m) => m.output_occurrences += s.output_occurrences,
            None => {
                merged.insert(s.segment_id.clone(), s);
            }
        }
    }
    let mut out: Vec<MemorizedSegment> = merged.into_values().collect();
    out.sort_by(|a, b| b.output_occurrences.cmp(&a.output_occurrences).then_with(|| a.segment_id.cmp(&b.segment_id)));
    out
}

/// Clone detection over a whole batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDetection {
    pub matches: Vec<CloneMatch>,
    pub segments: Vec<MemorizedSegment>,
}

impl BatchDetection {
    /// Output indices with at least one match.
    pub fn memorized_outputs(&self) -> HashSet<usize> {
        self.matches.iter().map(|m| m.output_index).collect()
    }

    pub fn unique_segments(&self) -> usize {
        self.segments.len()
    }
}

/// Detects clones in every output. Each segment's `output_occurrences` is
/// the number of verbatim occurrences of its text across the batch,
/// including occurrences inside longer reported spans.
pub fn detect_batch(index: &FingerprintIndex, corpus: &Corpus, outputs: &[OutputRecord]) -> BatchDetection {
    let per_output: Vec<Vec<(CloneMatch, MemorizedSegment)>> =
        outputs.par_iter().map(|o| find_clones(index, o, corpus)).collect();
    let mut matches = Vec::new();
    let mut segments = Vec::new();
    for (m, s) in per_output.into_iter().flatten() {
        matches.push(m);
        segments.push(s);
    }
    let mut segments = dedupe_segments(segments);
    let search = OutputSearch::new(outputs, index.window_lines());
    segments.par_iter_mut().for_each(|s| s.output_occurrences = search.count(&s.text));
    segments.sort_by(|a, b| b.output_occurrences.cmp(&a.output_occurrences).then_with(|| a.segment_id.cmp(&b.segment_id)));
    BatchDetection { matches, segments }
}

/// Positions `(doc, line)` where `seg` occurs verbatim.
fn positions(index: &FingerprintIndex, corpus: &Corpus, seg: &[&str]) -> Vec<(u32, usize)> {
    let l = index.window_lines();
    let sig = significant_lines(seg);
    let docs = corpus.documents();
    let matches_at = |d: &[String], c: usize| c + seg.len() <= d.len() && seg.iter().zip(&d[c..]).all(|(a, b)| a == b);
    if sig.len() < l {
        // Not indexable: scan every position.
        let mut out = Vec::new();
        for (k, d) in docs.iter().enumerate() {
            let d = doc_lines(d);
            out.extend((0..d.len()).filter(|&c| matches_at(d, c)).map(|c| (k as u32, c)));
        }
        return out;
    }
    let f = sig[0] as usize;
    let h = hash_lines(sig[..l].iter().map(|&i| seg[i as usize]));
    let mut out: Vec<(u32, usize)> = index
        .postings(h)
        .iter()
        .filter_map(|p| {
            let c = (p.line as usize).checked_sub(f)?;
            matches_at(doc_lines(&docs[p.doc as usize]), c).then_some((p.doc, c))
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Number of distinct `(document, start line)` positions where `text`
/// appears verbatim in `corpus`, using `index` to find candidates.
pub fn count_occurrences_indexed(index: &FingerprintIndex, corpus: &Corpus, text: &str) -> usize {
    positions(index, corpus, &text.split('\n').collect::<Vec<_>>()).len()
}

/// Like [`count_occurrences_indexed`] but scans the corpus directly.
pub fn count_occurrences(segment: &MemorizedSegment, corpus: &Corpus) -> usize {
    let seg = segment.lines();
    corpus
        .documents()
        .iter()
        .map(|d| {
            let d = doc_lines(d);
            (0..d.len()).filter(|&c| c + seg.len() <= d.len() && seg.iter().zip(&d[c..]).all(|(a, b)| a == b)).count()
        })
        .sum()
}

/// Indexed view of an output batch for counting verbatim occurrences.
#[derive(Debug, Clone)]
pub struct OutputSearch {
    corpus: Corpus,
    index: FingerprintIndex,
}

impl OutputSearch {
    pub fn new(batch: &[OutputRecord], window_lines: usize) -> Self {
        let docs = batch.iter().map(|o| Document::new(format!("{:012}", o.index), &o.text, "output")).collect();
        let corpus = Corpus::from_documents(docs, CorpusRole::Heldout).expect("output indices are unique");
        let index = FingerprintIndex::build(&corpus, window_lines, DEFAULT_SHARDS);
        Self { corpus, index }
    }

    pub fn count(&self, text: &str) -> usize {
        count_occurrences_indexed(&self.index, &self.corpus, text)
    }
}

/// Number of distinct `(output, start line)` positions holding the segment
/// text across `batch`.
pub fn count_output_occurrences(segment: &MemorizedSegment, batch: &[OutputRecord]) -> usize {
    let seg = segment.lines();
    batch
        .iter()
        .map(|o| {
            let lines = content_lines(&o.text);
            (0..lines.len())
                .filter(|&c| c + seg.len() <= lines.len() && seg.iter().zip(&lines[c..]).all(|(a, b)| a == b))
                .count()
        })
        .sum()
}

/// `inner` occurs verbatim, at line boundaries, inside `outer`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Containment {
    pub inner: String,
    pub outer: String,
}

/// Strict containment relations among segments, sorted.
pub fn containment(segments: &[MemorizedSegment], window_lines: usize) -> Vec<Containment> {
    let lines: Vec<Vec<&str>> = segments.iter().map(MemorizedSegment::lines).collect();
    let mut by_first: HashMap<u64, Vec<(usize, usize)>> = HashMap::new();
    for (k, ls) in lines.iter().enumerate() {
        let sig = significant_lines(ls);
        if sig.len() >= window_lines {
            let h = hash_lines(sig[..window_lines].iter().map(|&i| ls[i as usize]));
            by_first.entry(h).or_default().push((k, sig[0] as usize));
        }
    }
    let mut out: Vec<Containment> = (0..segments.len())
        .into_par_iter()
        .flat_map_iter(|b| {
            let outer = &lines[b];
            let sig = significant_lines(outer);
            let mut found = Vec::new();
            for (h, line) in window_hashes(outer, &sig, window_lines) {
                for &(a, f) in by_first.get(&h).map_or(&[][..], Vec::as_slice) {
                    let inner = &lines[a];
                    if a == b || inner.len() >= outer.len() {
                        continue;
                    }
                    let Some(c) = (line as usize).checked_sub(f) else { continue };
                    if c + inner.len() <= outer.len() && inner[..] == outer[c..c + inner.len()] {
                        found.push(Containment {
                            inner: segments[a].segment_id.clone(),
                            outer: segments[b].segment_id.clone(),
                        });
                    }
                }
            }
            found
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

pub fn write_segments_jsonl<W: Write>(segments: &[MemorizedSegment], mut out: W) -> std::io::Result<()> {
    for s in segments {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_segments_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<MemorizedSegment>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// CSV summary: `segment_id,line_count,training_count,output_count`.
pub fn write_segments_csv<W: Write>(segments: &[MemorizedSegment], mut out: W) -> std::io::Result<()> {
    writeln!(out, "segment_id,line_count,training_count,output_count")?;
    for s in segments {
        writeln!(out, "{},{},{},{}", s.segment_id, s.line_count, s.training_count(), s.output_occurrences)?;
    }
    out.flush()
}
