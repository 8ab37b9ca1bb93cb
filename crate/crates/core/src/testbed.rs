//! Deterministic synthetic corpus with planted, duplicated snippets.
//!
//! Documents are random template filler, some with planted snippets
//! interleaved. Snippets come in groups duplicated 1, 2, 4, ... times, each
//! copy in a different document. Each snippet line carries identifiers
//! unique to that snippet, so a high-order n-gram model continues a snippet
//! deterministically once it has entered it. Snippets are framed by `# region` / `# endregion` lines shared by
//! every copy. The opening line names the snippet by a path of branch
//! tokens (`r3 r3_5 r3_5_2`) with at most [`BRANCHING`] choices per step, so
//! top-k sampling with `k >= BRANCHING` can reach every snippet with
//! probability proportional to its duplication count.
//!
//! Probe documents are made entirely of unique identifiers: greedy decoding
//! from their first line reproduces the rest of the document.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, CorpusRole, Document};

pub const REGION_OPEN: &str = "# region";
pub const REGION_CLOSE: &str = "# endregion";
pub const BRANCHING: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedSpec {
    pub seed: u64,
    /// Training documents, probes included.
    pub documents: usize,
    pub frequencies: Vec<usize>,
    pub snippets_per_frequency: usize,
    pub probes: usize,
    pub heldout_documents: usize,
    /// Filler lines per host document, split around its snippets.
    pub filler_lines: (usize, usize),
}

impl Default for TestbedSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            documents: 2000,
            frequencies: vec![1, 2, 4, 8, 16, 32],
            snippets_per_frequency: 48,
            probes: 40,
            heldout_documents: 100,
            filler_lines: (100, 200),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSnippet {
    pub id: String,
    pub frequency: usize,
    /// Lines joined with `'\n'`, framing lines included, no trailing newline.
    pub text: String,
    /// `(document id, first line)` of every copy.
    pub locations: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub doc_id: String,
    /// First line of the document, newline included.
    pub prompt: String,
    /// The remainder of the document.
    pub continuation: String,
}

#[derive(Debug, Clone)]
pub struct Testbed {
    pub spec: TestbedSpec,
    pub training: Corpus,
    pub heldout: Corpus,
    pub snippets: Vec<PlantedSnippet>,
    pub probes: Vec<Probe>,
}

const VARS: &[&str] = &[
    "data", "items", "count", "total", "result", "value", "index", "buffer", "config", "path", "name", "node",
    "queue", "state", "cache", "offset", "limit", "score", "weight", "label", "row", "col", "key", "text",
];
const FUNCS: &[&str] = &[
    "process", "compute", "update", "parse", "render", "load", "save", "check", "merge", "split", "build",
    "flush", "reset", "apply", "handle", "fetch", "encode", "decode", "scale", "clean",
];
const MODULES: &[&str] =
    &["os", "sys", "json", "re", "math", "time", "random", "logging", "itertools", "collections", "typing", "pathlib"];
const WORDS: &[&str] = &[
    "todo", "check", "the", "input", "before", "saving", "this", "is", "slow", "handle", "edge", "cases", "fix",
    "later", "keep", "order", "stable", "note", "values", "may", "be", "empty",
];
const CLASSES: &[&str] = &["Base", "Node", "Tree", "Config", "Reader", "Writer", "Parser", "Cache", "Store", "Job"];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

/// One filler statement (possibly several lines).
fn filler_block(rng: &mut ChaCha8Rng) -> String {
    let v = pick(rng, VARS);
    let w = pick(rng, VARS);
    let f = pick(rng, FUNCS);
    let n: u32 = rng.gen_range(0..100);
    match rng.gen_range(0..15) {
        0 => format!("{v} = {f}({w})"),
        1 => format!("{v} = {w} + {n}"),
        2 => format!("if {v} > {n}:\n    {w} = {f}({v})"),
        3 => format!("for {v} in range({n}):\n    {f}({v})"),
        4 => format!("def {f}_{v}({w}):\n    return {w} * {n}"),
        5 => format!("print({v})"),
        6 => format!("import {}", pick(rng, MODULES)),
        7 => format!("# {} {} {}", pick(rng, WORDS), pick(rng, WORDS), pick(rng, WORDS)),
        8 => format!("{v}.append({w})"),
        9 => String::new(),
        10 => format!("while {v} < {n}:\n    {v} += 1"),
        11 => format!("class {}{}:\n    pass", pick(rng, CLASSES), pick(rng, CLASSES)),
        12 => format!("logging.info(\"{} %s\", {v})", pick(rng, WORDS)),
        13 => format!("try:\n    {f}({v})\nexcept ValueError:\n    pass"),
        _ => format!("{v}[{n}] = {w}"),
    }
}

fn filler(rng: &mut ChaCha8Rng, min_lines: usize, max_lines: usize) -> Vec<String> {
    let target = rng.gen_range(min_lines..=max_lines);
    let mut lines = Vec::new();
    while lines.len() < target {
        lines.extend(filler_block(rng).split('\n').map(str::to_owned));
    }
    lines
}

/// A statement whose every run of four tokens holds an identifier ending in
/// `tag`. Lines start with such an identifier.
fn unique_statement(rng: &mut ChaCha8Rng, tag: &str, i: usize) -> String {
    let a = format!("{}_{tag}_{i}", pick(rng, VARS));
    let b = format!("{}_{tag}_f{i}", pick(rng, FUNCS));
    let c = format!("{}_{tag}_{}", pick(rng, VARS), i + 1);
    match rng.gen_range(0..5) {
        0 => format!("{a} = {b}({c})"),
        1 => format!("{a} = {c}.{b}({c}, {a}_x)"),
        2 => format!("{b}({a})"),
        3 => format!("{a} = {c} + {b}"),
        _ => format!("{a} = {c}[{b}]"),
    }
}

/// `# region r1 r1_4 r1_4_0` for `code = 1·49 + 4·7 + 0` at depth 3.
fn region_line(code: usize, depth: usize) -> String {
    let mut digits = Vec::with_capacity(depth);
    let mut c = code;
    for _ in 0..depth {
        digits.push(c % BRANCHING);
        c /= BRANCHING;
    }
    digits.reverse();
    let mut line = REGION_OPEN.to_owned();
    for k in 1..=depth {
        let path: Vec<String> = digits[..k].iter().map(usize::to_string).collect();
        line.push_str(&format!(" r{}", path.join("_")));
    }
    line
}

fn snippet_lines(rng: &mut ChaCha8Rng, tag: &str, region: String) -> Vec<String> {
    let body = rng.gen_range(6..=9);
    let mut lines = vec![region, format!("def build_{tag}(cfg_{tag}):")];
    lines.extend((0..body).map(|i| unique_statement(rng, tag, i)));
    lines.push(format!("done_{tag} = finish_{tag}"));
    lines.push(REGION_CLOSE.to_owned());
    lines
}

fn probe_lines(rng: &mut ChaCha8Rng, tag: &str) -> Vec<String> {
    let mut lines = vec![format!("probe_{tag} = open_{tag}()")];
    lines.extend((0..7).map(|i| unique_statement(rng, tag, i)));
    lines
}

fn doc_id(d: usize) -> String {
    format!("tb{d:05}")
}

fn join(lines: &[String]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// Builds the testbed. Identical specs give identical corpora.
pub fn build_testbed(spec: &TestbedSpec) -> Result<Testbed, CorpusError> {
    let hosts = spec.documents.saturating_sub(spec.probes);
    let max_freq = spec.frequencies.iter().copied().max().unwrap_or(0);
    if max_freq > hosts {
        return Err(CorpusError::Invalid(format!(
            "frequency {max_freq} exceeds the {hosts} documents left after {} probes",
            spec.probes
        )));
    }
    if spec.filler_lines.0 == 0 || spec.filler_lines.0 > spec.filler_lines.1 {
        return Err(CorpusError::Invalid(format!("bad filler range {:?}", spec.filler_lines)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let count = spec.frequencies.len() * spec.snippets_per_frequency;
    let mut depth = 1;
    while BRANCHING.pow(depth as u32) < count {
        depth += 1;
    }
    let mut codes: Vec<usize> = (0..BRANCHING.pow(depth as u32)).collect();
    codes.shuffle(&mut rng);

    let mut snippets = Vec::new();
    let mut snippet_text = Vec::new();
    for &freq in &spec.frequencies {
        for _ in 0..spec.snippets_per_frequency {
            let tag = format!("s{:03}", snippets.len());
            let lines = snippet_lines(&mut rng, &tag, region_line(codes[snippets.len()], depth));
            snippets.push(PlantedSnippet { id: tag, frequency: freq, text: lines.join("\n"), locations: Vec::new() });
            snippet_text.push(lines);
        }
    }

    // Document positions: probes first, then hosts.
    let mut order: Vec<usize> = (0..spec.documents).collect();
    order.shuffle(&mut rng);
    let (probe_pos, host_pos) = order.split_at(spec.probes);
    let mut planted: Vec<Vec<usize>> = vec![Vec::new(); hosts];
    for (s, snip) in snippets.iter().enumerate() {
        for h in rand::seq::index::sample(&mut rng, hosts, snip.frequency) {
            planted[h].push(s);
        }
    }

    let mut contents: Vec<Vec<String>> = vec![Vec::new(); spec.documents];
    let mut probes = Vec::new();
    for (p, &d) in probe_pos.iter().enumerate() {
        let lines = probe_lines(&mut rng, &format!("p{p:03}"));
        probes.push(Probe { doc_id: doc_id(d), prompt: format!("{}\n", lines[0]), continuation: join(&lines[1..]) });
        contents[d] = lines;
    }
    let (lo, hi) = spec.filler_lines;
    for (h, &d) in host_pos.iter().enumerate() {
        let mut here = std::mem::take(&mut planted[h]);
        here.shuffle(&mut rng);
        let gaps = here.len() + 1;
        let mut lines = filler(&mut rng, (lo / gaps).max(1), (hi / gaps).max(1));
        for s in here {
            snippets[s].locations.push((doc_id(d), lines.len()));
            lines.extend(snippet_text[s].iter().cloned());
            lines.extend(filler(&mut rng, (lo / gaps).max(1), (hi / gaps).max(1)));
        }
        contents[d] = lines;
    }
    for s in &mut snippets {
        s.locations.sort();
    }
    let docs = contents.iter().enumerate().map(|(d, lines)| Document::new(doc_id(d), &join(lines), "testbed")).collect();
    probes.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

    let mut held_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_4e1d);
    let held = (0..spec.heldout_documents)
        .map(|d| Document::new(format!("hd{d:05}"), &join(&filler(&mut held_rng, 20, 60)), "testbed"))
        .collect();

    Ok(Testbed {
        spec: spec.clone(),
        training: Corpus::from_documents(docs, CorpusRole::Training)?,
        heldout: Corpus::from_documents(held, CorpusRole::Heldout)?,
        snippets,
        probes,
    })
}
