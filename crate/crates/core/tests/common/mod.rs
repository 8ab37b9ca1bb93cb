#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use memaudit::clonedetect::{content_lines, is_significant, CloneMatch, MemorizedSegment};
use memaudit::corpus::{Corpus, CorpusRole, Document};
use memaudit::provider::ProviderHandle;
use memaudit::refmodel::{NGramModel, DEFAULT_BACKOFF_ALPHA};
use memaudit::testbed::{build_testbed, Testbed, TestbedSpec};

pub type SpanSet = BTreeSet<((usize, usize), Vec<(String, usize)>)>;

pub fn corpus_of(texts: &[String]) -> Corpus {
    let docs = texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i:04}"), t, "test")).collect();
    Corpus::from_documents(docs, CorpusRole::Training).unwrap()
}

/// Quadratic clone reference. For each output line `o`, `R(o)` is the
/// longest run of output lines starting at `o` that equals some corpus run.
/// A span `[o, o + R(o))` is reported when it cannot be extended upward
/// (`R(o - 1) <= R(o)`) and holds at least `l` significant lines. Its
/// locations are every corpus position where the whole span matches.
pub fn oracle(c: &Corpus, text: &str, l: usize) -> SpanSet {
    let out = content_lines(text);
    let n = out.len();
    let mut best = vec![0usize; n + 1];
    let mut runs: Vec<(String, Vec<Vec<usize>>)> = Vec::new();
    for d in c.documents() {
        let dl = content_lines(&d.text);
        let mut run = vec![vec![0usize; dl.len() + 1]; n + 1];
        for o in (0..n).rev() {
            for k in (0..dl.len()).rev() {
                if out[o] == dl[k] {
                    run[o][k] = run[o + 1][k + 1] + 1;
                    best[o] = best[o].max(run[o][k]);
                }
            }
        }
        runs.push((d.id.clone(), run));
    }
    let mut spans = BTreeSet::new();
    for o in 0..n {
        let r = best[o];
        if r == 0 || (o > 0 && best[o - 1] > r) {
            continue;
        }
        if out[o..o + r].iter().filter(|x| is_significant(x)).count() < l {
            continue;
        }
        let locs = runs
            .iter()
            .flat_map(|(id, run)| run[o].iter().enumerate().filter(|&(_, &v)| v >= r).map(move |(k, _)| (id.clone(), k)))
            .collect();
        spans.insert(((o, o + r), locs));
    }
    spans
}

pub fn as_span_set(found: &[(CloneMatch, MemorizedSegment)]) -> SpanSet {
    found
        .iter()
        .map(|(m, s)| (m.output_span, s.training_locations.iter().map(|t| (t.doc_id.clone(), t.start_line)).collect()))
        .collect()
}

pub struct Bench {
    pub testbed: Testbed,
    pub order5: Arc<NGramModel>,
    pub order2: Arc<NGramModel>,
}

impl Bench {
    pub fn new(spec: &TestbedSpec) -> Self {
        let testbed = build_testbed(spec).unwrap();
        let order5 = Arc::new(NGramModel::train(&testbed.training, 5, DEFAULT_BACKOFF_ALPHA).unwrap());
        let order2 = Arc::new(NGramModel::train(&testbed.training, 2, DEFAULT_BACKOFF_ALPHA).unwrap());
        Self { testbed, order5, order2 }
    }

    pub fn standard() -> Self {
        Self::new(&TestbedSpec::default())
    }

    pub fn handle(&self, order: usize) -> ProviderHandle {
        let m = if order == 5 { &self.order5 } else { &self.order2 };
        ProviderHandle::builtin(Arc::clone(m), format!("ngram-{order}"))
    }
}
