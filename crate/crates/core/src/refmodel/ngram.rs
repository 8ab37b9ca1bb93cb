use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::vocab::{split_tokens, Vocabulary};
use super::RefModelError;
use crate::corpus::Corpus;
use crate::provider::TokenDistribution;
use crate::TokenId;

pub const DEFAULT_BACKOFF_ALPHA: f64 = 0.4;
/// `ln(1e-12)`: per-token log-probabilities are clamped from below to this.
pub const LOGPROB_FLOOR: f64 = -27.631_021_115_928_547;
/// First line of a serialized model file.
pub const MODEL_MAGIC: &str = "MEMAUDIT-NGRAM-v1";

const ROOT: u32 = 0;

#[inline]
fn edge_key(node: u32, token: TokenId) -> u64 {
    (u64::from(node) << 32) | u64::from(token)
}

#[derive(Debug, Clone)]
struct Node {
    parent: u32,
    /// Oldest token of this node's context.
    token: TokenId,
    start: u32,
    len: u32,
    total: u64,
}

/// Stupid-backoff n-gram model.
///
/// The next-token distribution is the relative-frequency table of the
/// longest stored context suffix (at most `order - 1` tokens). Scoring a
/// token outside that table backs off to shorter contexts, multiplying by
/// `alpha` per level, as in classic stupid backoff.
///
/// Contexts live in a trie keyed by tokens read newest-first, so a node's
/// trie parent is exactly its backoff context.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab: Vocabulary,
    nodes: Vec<Node>,
    children: HashMap<u64, u32>,
    /// Per node, `(token, count)` sorted by token.
    entries: Vec<(TokenId, u32)>,
    /// Per node, absolute indices into `entries` sorted by count desc then token.
    ranked: Vec<u32>,
}

struct Builder {
    order: usize,
    parents: Vec<(u32, TokenId)>,
    children: HashMap<u64, u32>,
    counts: HashMap<u64, u32>,
}

impl Builder {
    fn new(order: usize) -> Self {
        Self { order, parents: vec![(ROOT, 0)], children: HashMap::new(), counts: HashMap::new() }
    }

    fn child(&mut self, node: u32, token: TokenId) -> u32 {
        let next = self.parents.len() as u32;
        let id = *self.children.entry(edge_key(node, token)).or_insert(next);
        if id == next {
            self.parents.push((node, token));
        }
        id
    }

    fn add(&mut self, node: u32, target: TokenId, count: u32) {
        *self.counts.entry(edge_key(node, target)).or_insert(0) += count;
    }

    /// Counts every k-gram (k <= order) ending at each position after the first.
    fn observe(&mut self, seq: &[TokenId]) {
        for i in 1..seq.len() {
            let target = seq[i];
            self.add(ROOT, target, 1);
            let mut node = ROOT;
            for l in 1..=(self.order - 1).min(i) {
                node = self.child(node, seq[i - l]);
                self.add(node, target, 1);
            }
        }
    }

    fn finish(self, vocab: Vocabulary, alpha: f64) -> Result<NGramModel, RefModelError> {
        let mut flat: Vec<(u64, u32)> = self.counts.into_iter().collect();
        flat.sort_unstable_by_key(|&(k, _)| k);
        let mut nodes: Vec<Node> = self
            .parents
            .iter()
            .map(|&(parent, token)| Node { parent, token, start: 0, len: 0, total: 0 })
            .collect();
        let mut entries = Vec::with_capacity(flat.len());
        for (key, count) in flat {
            let node = (key >> 32) as usize;
            let token = key as u32;
            if token as usize >= vocab.len() {
                return Err(RefModelError::UnknownId(token));
            }
            let n = &mut nodes[node];
            if n.len == 0 {
                n.start = entries.len() as u32;
            }
            n.len += 1;
            n.total += u64::from(count);
            entries.push((token, count));
        }
        if nodes.iter().any(|n| n.total == 0) {
            return Err(RefModelError::Format("every stored context needs at least one count".into()));
        }
        let mut ranked: Vec<u32> = (0..entries.len() as u32).collect();
        for n in &nodes {
            let slice = &mut ranked[n.start as usize..(n.start + n.len) as usize];
            slice.sort_unstable_by_key(|&i| (std::cmp::Reverse(entries[i as usize].1), entries[i as usize].0));
        }
        Ok(NGramModel { order: self.order, alpha, vocab, nodes, children: self.children, entries, ranked })
    }
}

fn check_params(order: usize, alpha: f64) -> Result<(), RefModelError> {
    if order == 0 {
        return Err(RefModelError::InvalidParameter("order must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RefModelError::InvalidParameter(format!("backoff alpha {alpha} not in (0, 1)")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    order: usize,
    alpha: f64,
    vocabulary: Vec<String>,
    contexts: Vec<StoredContext>,
}

#[derive(Serialize, Deserialize)]
struct StoredContext {
    /// Oldest token first.
    context: Vec<TokenId>,
    next: Vec<(TokenId, u32)>,
}

impl NGramModel {
    /// Trains on every document of `corpus`, each wrapped in start/end markers.
    pub fn train(corpus: &Corpus, order: usize, alpha: f64) -> Result<Self, RefModelError> {
        check_params(order, alpha)?;
        if corpus.is_empty() {
            return Err(RefModelError::EmptyCorpus);
        }
        let vocab = Vocabulary::from_tokens(corpus.documents().iter().flat_map(|d| split_tokens(&d.text)));
        let seqs: Vec<Vec<TokenId>> = corpus.documents().iter().map(|d| vocab.encode(&d.text)).collect();
        Self::train_sequences(vocab, &seqs, order, alpha)
    }

    /// Trains on pre-tokenized sequences (start/end markers are added here).
    pub fn train_sequences(
        vocab: Vocabulary,
        seqs: &[Vec<TokenId>],
        order: usize,
        alpha: f64,
    ) -> Result<Self, RefModelError> {
        check_params(order, alpha)?;
        if seqs.is_empty() {
            return Err(RefModelError::EmptyCorpus);
        }
        let mut b = Builder::new(order);
        let mut buf = Vec::new();
        for s in seqs {
            buf.clear();
            buf.push(vocab.bos_id());
            buf.extend_from_slice(s);
            buf.push(vocab.eos_id());
            b.observe(&buf);
        }
        b.finish(vocab, alpha)
    }

    /// Builds a model from explicit `(context, next, count)` tables. Every
    /// suffix of a listed context must also be listed.
    pub fn from_counts<I>(vocab: Vocabulary, order: usize, alpha: f64, tables: I) -> Result<Self, RefModelError>
    where
        I: IntoIterator<Item = (Vec<TokenId>, Vec<(TokenId, u32)>)>,
    {
        check_params(order, alpha)?;
        let mut b = Builder::new(order);
        for (context, next) in tables {
            if context.len() >= order {
                return Err(RefModelError::Format(format!("context of length {} for order {order}", context.len())));
            }
            let mut node = ROOT;
            for &t in context.iter().rev() {
                node = b.child(node, t);
            }
            for (t, c) in next {
                if c == 0 {
                    return Err(RefModelError::Format("zero count".into()));
                }
                b.add(node, t, c);
            }
        }
        if b.counts.is_empty() {
            return Err(RefModelError::EmptyCorpus);
        }
        b.finish(vocab, alpha)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Number of stored contexts, the empty context included.
    pub fn context_count(&self) -> usize {
        self.nodes.len()
    }

    fn node_entries(&self, node: u32) -> &[(TokenId, u32)] {
        let n = &self.nodes[node as usize];
        &self.entries[n.start as usize..(n.start + n.len) as usize]
    }

    fn count(&self, node: u32, token: TokenId) -> u32 {
        let e = self.node_entries(node);
        e.binary_search_by_key(&token, |&(t, _)| t).map(|i| e[i].1).unwrap_or(0)
    }

    /// Count of `next` after exactly `context` (oldest token first), if stored.
    pub fn ngram_count(&self, context: &[TokenId], next: TokenId) -> u32 {
        let mut node = ROOT;
        for &t in context.iter().rev() {
            match self.children.get(&edge_key(node, t)) {
                Some(&c) => node = c,
                None => return 0,
            }
        }
        self.count(node, next)
    }

    /// Nodes for the context suffixes of length 0, 1, .. that are stored,
    /// capped at `order - 1`. The last element is the longest match.
    fn chain(&self, context: &[TokenId]) -> Vec<u32> {
        let mut chain = Vec::with_capacity(self.order);
        chain.push(ROOT);
        let mut node = ROOT;
        for &t in context.iter().rev().take(self.order - 1) {
            match self.children.get(&edge_key(node, t)) {
                Some(&c) => {
                    node = c;
                    chain.push(c);
                }
                None => break,
            }
        }
        chain
    }

    /// Stupid-backoff score: relative frequency under the longest context
    /// that has seen `token`, times `alpha` per level backed off.
    fn score(&self, chain: &[u32], token: TokenId) -> f64 {
        let mut weight = 1.0;
        for &node in chain.iter().rev() {
            let c = self.count(node, token);
            if c > 0 {
                return weight * f64::from(c) / self.nodes[node as usize].total as f64;
            }
            weight *= self.alpha;
        }
        0.0
    }

    /// Backoff score of `token` after `context`. Equals the probability in
    /// [`next_token_dist`](Self::next_token_dist) for every token in its support.
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        self.score(&self.chain(context), token)
    }

    fn longest(&self, context: &[TokenId]) -> u32 {
        *self.chain(context).last().expect("chain contains the root")
    }

    /// Next-token distribution from the longest matching context, sorted by
    /// probability (descending) then id. Falls back to unigram frequencies
    /// when no context token matches.
    pub fn next_token_dist(&self, context: &[TokenId]) -> TokenDistribution<f64> {
        TokenDistribution::from_probs(self.top_k(context, usize::MAX))
    }

    /// The `k` most probable next tokens in distribution order.
    pub fn top_k(&self, context: &[TokenId], k: usize) -> Vec<(TokenId, f64)> {
        let n = &self.nodes[self.longest(context) as usize];
        let total = n.total as f64;
        self.ranked[n.start as usize..(n.start + n.len) as usize]
            .iter()
            .take(k)
            .map(|&i| {
                let (w, c) = self.entries[i as usize];
                (w, f64::from(c) / total)
            })
            .collect()
    }

    /// `ln P(x_i | start, x_<i)` for each token, floored at [`LOGPROB_FLOOR`].
    pub fn score_logprobs(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut ctx = Vec::with_capacity(tokens.len() + 1);
        ctx.push(self.vocab.bos_id());
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let p = self.prob(&ctx, t);
            out.push(if p > 0.0 { p.ln().max(LOGPROB_FLOOR) } else { LOGPROB_FLOOR });
            ctx.push(t);
        }
        out
    }

    /// Writes the magic header line followed by a JSON body.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), RefModelError> {
        let mut contexts = Vec::with_capacity(self.nodes.len());
        for v in 0..self.nodes.len() {
            let mut context = Vec::new();
            let mut cur = v as u32;
            while cur != ROOT {
                context.push(self.nodes[cur as usize].token);
                cur = self.nodes[cur as usize].parent;
            }
            contexts.push(StoredContext { context, next: self.node_entries(v as u32).to_vec() });
        }
        let stored = StoredModel {
            order: self.order,
            alpha: self.alpha,
            vocabulary: self.vocab.tokens().to_vec(),
            contexts,
        };
        writeln!(out, "{MODEL_MAGIC}")?;
        serde_json::to_writer(&mut out, &stored).map_err(|e| RefModelError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, RefModelError> {
        let mut reader = BufReader::new(input);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        if header.trim_end() != MODEL_MAGIC {
            return Err(RefModelError::Format(format!("expected header {MODEL_MAGIC}, found {:?}", header.trim_end())));
        }
        let stored: StoredModel =
            serde_json::from_reader(reader).map_err(|e| RefModelError::Format(e.to_string()))?;
        let vocab = Vocabulary::from_ordered(stored.vocabulary)?;
        Self::from_counts(vocab, stored.order, stored.alpha, stored.contexts.into_iter().map(|c| (c.context, c.next)))
    }
}
