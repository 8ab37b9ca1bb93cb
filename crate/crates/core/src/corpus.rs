//! Training and held-out corpora: ingestion, newline normalization and
//! line-balanced chunking.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {entry}: {source}")]
    Unreadable {
        entry: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {entry}: {reason}")]
    Malformed { entry: String, reason: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("source {0} does not exist")]
    Missing(PathBuf),
    #[error("invalid corpus parameters: {0}")]
    Invalid(String),
    #[error("failed to write corpus: {0}")]
    Write(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Training,
    Heldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Directory,
    Jsonl,
}

/// One normalized file of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// `text` split on `'\n'`; joining with `"\n"` gives `text` back.
    pub lines: Vec<String>,
    pub origin: String,
}

impl Document {
    pub fn new(id: impl Into<String>, raw: &str, origin: impl Into<String>) -> Self {
        let text = normalize_text(raw);
        let lines = text.split('\n').map(str::to_owned).collect();
        Self { id: id.into(), text, lines, origin: origin.into() }
    }

    /// Number of lines, not counting the empty remainder after a final newline.
    pub fn line_count(&self) -> usize {
        count_lines(&self.text)
    }
}

pub(crate) fn count_lines(text: &str) -> usize {
    if text.is_empty() {
        return 0;
    }
    let n = text.split('\n').count();
    if text.ends_with('\n') {
        n - 1
    } else {
        n
    }
}

/// An immutable, id-ordered collection of documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    total_lines: usize,
    role: CorpusRole,
}

impl Corpus {
    /// Builds a corpus, sorting documents by id. Duplicate ids are rejected.
    pub fn from_documents(mut documents: Vec<Document>, role: CorpusRole) -> Result<Self, CorpusError> {
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = documents.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CorpusError::DuplicateId(w[0].id.clone()));
        }
        let total_lines = documents.iter().map(Document::line_count).sum();
        Ok(Self { documents, total_lines, role })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn total_lines(&self) -> usize {
        self.total_lines
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.documents[i])
    }

    /// SHA-256 over ids and texts, hex encoded. Stable across platforms.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.documents {
            h.update((d.id.len() as u64).to_le_bytes());
            h.update(d.id.as_bytes());
            h.update((d.text.len() as u64).to_le_bytes());
            h.update(d.text.as_bytes());
        }
        hex(&h.finalize())
    }

    /// Writes the corpus as JSONL (`{"id":..,"text":..}` per line).
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for d in &self.documents {
            let rec = JsonlRecord { id: d.id.clone(), text: d.text.clone() };
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Drops documents whose text exactly duplicates an earlier one (by id order).
    pub fn dedup_exact(&self) -> Corpus {
        let mut seen = HashSet::new();
        let documents: Vec<Document> = self
            .documents
            .iter()
            .filter(|d| seen.insert(xxhash_rust::xxh3::xxh3_128(d.text.as_bytes())))
            .cloned()
            .collect();
        let total_lines = documents.iter().map(Document::line_count).sum();
        Corpus { documents, total_lines, role: self.role }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    id: String,
    text: String,
}

/// Ingestion options for [`load_corpus`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: SourceFormat,
    pub role: CorpusRole,
    /// File extensions (without the dot) accepted for directory sources.
    pub extensions: Vec<String>,
    /// Remove exact duplicate files after loading.
    pub dedup: bool,
}

impl LoadOptions {
    pub fn new(format: SourceFormat, role: CorpusRole) -> Self {
        Self { format, role, extensions: vec!["py".to_owned()], dedup: false }
    }
}

/// Result of ingestion: the corpus plus the number of invalid UTF-8
/// sequences that were replaced.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub corpus: Corpus,
    pub replaced_sequences: usize,
}

pub fn load_corpus(source: &Path, opts: &LoadOptions) -> Result<Loaded, CorpusError> {
    if !source.exists() {
        return Err(CorpusError::Missing(source.to_owned()));
    }
    let loaded = match opts.format {
        SourceFormat::Directory => load_directory(source, opts)?,
        SourceFormat::Jsonl => {
            let f = fs::File::open(source).map_err(|e| CorpusError::Unreadable {
                entry: source.display().to_string(),
                source: e,
            })?;
            read_jsonl(BufReader::new(f), &source.display().to_string(), opts.role)?
        }
    };
    if loaded.replaced_sequences > 0 {
        log::warn!("{} invalid UTF-8 sequences replaced while loading {}", loaded.replaced_sequences, source.display());
    }
    if opts.dedup {
        let corpus = loaded.corpus.dedup_exact();
        return Ok(Loaded { corpus, replaced_sequences: loaded.replaced_sequences });
    }
    Ok(loaded)
}

fn load_directory(root: &Path, opts: &LoadOptions) -> Result<Loaded, CorpusError> {
    let mut paths = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| CorpusError::Unreadable {
            entry: e.path().map(|p| p.display().to_string()).unwrap_or_default(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext_ok = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| opts.extensions.iter().any(|x| x == e));
        if ext_ok {
            paths.push(entry.into_path());
        }
    }
    let docs: Vec<(Document, usize)> = paths
        .par_iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| CorpusError::Unreadable { entry: p.display().to_string(), source: e })?;
            let (raw, replaced) = decode_lossy(&bytes);
            let rel = p.strip_prefix(root).unwrap_or(p);
            let id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok((Document::new(id, &raw, p.display().to_string()), replaced))
        })
        .collect::<Result<_, CorpusError>>()?;
    let replaced_sequences = docs.iter().map(|(_, r)| r).sum();
    let corpus = Corpus::from_documents(docs.into_iter().map(|(d, _)| d).collect(), opts.role)?;
    Ok(Loaded { corpus, replaced_sequences })
}

/// Reads JSONL records `{"id": string, "text": string}`; blank lines are skipped.
pub fn read_jsonl<R: Read>(reader: R, name: &str, role: CorpusRole) -> Result<Loaded, CorpusError> {
    let mut docs = Vec::new();
    let mut replaced_sequences = 0;
    for (i, line) in BufReader::new(reader).split(b'\n').enumerate() {
        let entry = format!("{name}:{}", i + 1);
        let line = line.map_err(|e| CorpusError::Unreadable { entry: entry.clone(), source: e })?;
        let (line, replaced) = decode_lossy(&line);
        replaced_sequences += replaced;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed { entry, reason: e.to_string() })?;
        docs.push(Document::new(rec.id, &rec.text, format!("{name}#{}", i + 1)));
    }
    let corpus = Corpus::from_documents(docs, role)?;
    Ok(Loaded { corpus, replaced_sequences })
}

/// Decodes bytes as UTF-8, replacing invalid sequences with U+FFFD.
pub fn decode_lossy(bytes: &[u8]) -> (String, usize) {
    let mut replaced = 0;
    let mut out = String::with_capacity(bytes.len());
    for chunk in bytes.utf8_chunks() {
        out.push_str(chunk.valid());
        if !chunk.invalid().is_empty() {
            out.push(char::REPLACEMENT_CHARACTER);
            replaced += 1;
        }
    }
    (out, replaced)
}

/// Converts `"\r\n"` and lone `"\r"` to `"\n"`. Nothing else changes.
pub fn normalize_text(raw: &str) -> String {
    if !raw.contains('\r') {
        return raw.to_owned();
    }
    raw.replace("\r\n", "\n").replace('\r', "\n")
}

/// Partitions documents into at most `n_chunks` groups with balanced line
/// totals: largest documents first, each into the currently lightest chunk
/// (lowest index on ties). Empty chunks are dropped.
pub fn split_chunks(corpus: &Corpus, n_chunks: usize) -> Vec<Corpus> {
    assert!(n_chunks >= 1, "n_chunks must be positive");
    if n_chunks > corpus.len() {
        log::warn!("requested {n_chunks} chunks but corpus has only {} documents", corpus.len());
    }
    let bins = n_chunks.min(corpus.len()).max(1);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    // Stable sort keeps id order among equal sizes.
    order.sort_by_key(|&i| std::cmp::Reverse(corpus.documents[i].line_count()));
    let mut loads = vec![0usize; bins];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for i in order {
        let (b, _) = loads.iter().enumerate().min_by_key(|&(b, &l)| (l, b)).expect("bins >= 1");
        loads[b] += corpus.documents[i].line_count();
        members[b].push(i);
    }
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|mut m| {
            m.sort_unstable();
            let documents: Vec<Document> = m.into_iter().map(|i| corpus.documents[i].clone()).collect();
            let total_lines = documents.iter().map(Document::line_count).sum();
            Corpus { documents, total_lines, role: corpus.role }
        })
        .collect()
}
