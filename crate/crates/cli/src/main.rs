//! `memaudit`: audit code language models for memorized training data.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use memaudit::audit::{
    build_models, emit_report, load_inputs, read_report, run_audit, AuditConfig, AuditError, AuditRun, ModelSpec,
    ReportFormat, EXIT_CONFIG, EXIT_INTERNAL, EXIT_PROVIDER, FINDINGS_FILE, MATCHES_FILE, OUTPUTS_FILE, REPORT_JSON,
    SCORES_FILE, SEGMENTS_FILE,
};
use memaudit::clonedetect::{FingerprintIndex, DEFAULT_SHARDS};
use memaudit::corpus::{load_corpus, CorpusRole, LoadOptions, SourceFormat};
use memaudit::experiments::{run_sweep, write_sweep_csv, Factor, SweepContext, SweepSpec};
use memaudit::generate::start_prompt;
use memaudit::provider::{LanguageModel, ProviderHandle, RemoteOptions};
use memaudit::refmodel::{NGramModel, DEFAULT_BACKOFF_ALPHA};
use memaudit::testbed::{build_testbed, TestbedSpec};

#[derive(Debug, Parser)]
#[command(name = "memaudit", version, about = "Audit code language models for memorized training data")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Shared {
    /// Audit configuration, TOML or JSON.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the generation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Mask secrets in reports (the default).
    #[arg(long, global = true, overrides_with = "unsafe_no_redact")]
    redact: bool,
    /// Print secrets unmasked.
    #[arg(long = "unsafe-no-redact", global = true, overrides_with = "redact")]
    unsafe_no_redact: bool,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

impl Shared {
    fn redaction(&self) -> Option<bool> {
        match (self.redact, self.unsafe_no_redact) {
            (true, _) => Some(true),
            (false, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build corpora.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train or inspect models.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Generate the output batch (`outputs.jsonl`).
    Generate,
    /// Find memorized segments in the batch (`segments.jsonl`, `matches.jsonl`).
    Detect,
    /// Score the batch with every metric (`scores.csv`).
    Metrics,
    /// Scan the batch for secrets (`findings.jsonl`).
    Scan,
    /// Vary one generation factor and count unique memorized segments.
    Sweep(SweepArgs),
    /// Run every stage and write the report.
    Audit,
    /// Re-emit a finished audit's report in other formats.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Dir,
    Jsonl,
}

impl From<Format> for SourceFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Dir => SourceFormat::Directory,
            Format::Jsonl => SourceFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Role {
    Training,
    Heldout,
}

impl From<Role> for CorpusRole {
    fn from(r: Role) -> Self {
        match r {
            Role::Training => CorpusRole::Training,
            Role::Heldout => CorpusRole::Heldout,
        }
    }
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Read a source tree or JSONL file and write `<role>.jsonl`.
    Ingest {
        source: PathBuf,
        /// Source layout; inferred from the path when omitted.
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, value_enum, default_value = "training")]
        role: Role,
        /// Drop exact duplicate documents.
        #[arg(long)]
        dedup: bool,
        /// File extensions to keep from a source tree.
        #[arg(long = "ext", value_delimiter = ',')]
        extensions: Vec<String>,
    },
    /// Write the synthetic testbed: training, held-out, planted snippets, probes.
    Testbed {
        #[arg(long)]
        documents: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Train an n-gram reference model and write `ngram-<order>.model`.
    Train {
        corpus: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, default_value_t = 5)]
        order: usize,
        #[arg(long, default_value_t = DEFAULT_BACKOFF_ALPHA)]
        alpha: f64,
    },
    /// Print a model's metadata and the result of a tokenizer round trip and one distribution request.
    ServeInfo {
        #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
        model: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FactorArg {
    ModelOrder,
    TopK,
    MaxTokens,
    NumOutputs,
}

impl From<FactorArg> for Factor {
    fn from(f: FactorArg) -> Self {
        match f {
            FactorArg::ModelOrder => Factor::ModelOrder,
            FactorArg::TopK => Factor::TopK,
            FactorArg::MaxTokens => Factor::MaxTokens,
            FactorArg::NumOutputs => Factor::NumOutputs,
        }
    }
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    factor: FactorArg,
    /// Strictly increasing values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Formats to write: json, csv, txt.
    #[arg(long, value_delimiter = ',', default_value = "json,csv,txt")]
    format: Vec<ReportFormat>,
}

struct Failure {
    code: i32,
    message: String,
}

fn config_error(m: impl Display) -> Failure {
    Failure { code: EXIT_CONFIG, message: m.to_string() }
}

fn provider_error(m: impl Display) -> Failure {
    Failure { code: EXIT_PROVIDER, message: m.to_string() }
}

fn internal_error(m: impl Display) -> Failure {
    Failure { code: EXIT_INTERNAL, message: m.to_string() }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        Failure { code: e.exit_code(), message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        internal_error(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.shared.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.shared.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("memaudit: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let shared = &cli.shared;
    match &cli.command {
        Command::Corpus(CorpusCommand::Ingest { source, format, role, dedup, extensions }) => {
            ingest(shared, source, *format, *role, *dedup, extensions)
        }
        Command::Corpus(CorpusCommand::Testbed { documents, probes }) => testbed(shared, *documents, *probes),
        Command::Model(ModelCommand::Train { corpus, format, order, alpha }) => {
            train(shared, corpus, *format, *order, *alpha)
        }
        Command::Model(ModelCommand::ServeInfo { model, endpoint }) => serve_info(model.as_deref(), endpoint.as_deref()),
        Command::Generate => stage(shared, StageCommand::Generate),
        Command::Detect => stage(shared, StageCommand::Detect),
        Command::Metrics => stage(shared, StageCommand::Metrics),
        Command::Scan => stage(shared, StageCommand::Scan),
        Command::Sweep(args) => sweep(shared, args),
        Command::Audit => {
            let cfg = load_config(shared)?;
            let report = run_audit(&cfg)?;
            print!("{}", report.summary_text());
            Ok(())
        }
        Command::Report(args) => {
            let dir = out_dir(shared)?;
            let report = read_report(&dir.join(REPORT_JSON))
                .map_err(|e| config_error(format!("{}: {e}", dir.join(REPORT_JSON).display())))?;
            for p in emit_report(&report, &args.format, &dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn out_dir(shared: &Shared) -> Result<PathBuf, Failure> {
    shared.out.clone().ok_or_else(|| config_error("--out <DIR> is required"))
}

fn load_config(shared: &Shared) -> Result<AuditConfig, Failure> {
    let path = shared.config.as_deref().ok_or_else(|| config_error("--config <PATH> is required"))?;
    let mut cfg = AuditConfig::load(path)?;
    if let Some(seed) = shared.seed {
        cfg.generation.seed = seed;
    }
    if let Some(out) = &shared.out {
        cfg.out_dir = out.clone();
    }
    if let Some(r) = shared.redaction() {
        cfg.redact = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn infer_format(path: &Path, format: Option<Format>) -> SourceFormat {
    match format {
        Some(f) => f.into(),
        None if path.is_dir() => SourceFormat::Directory,
        None => SourceFormat::Jsonl,
    }
}

fn write_file(path: &Path, fill: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    fill(&mut w)?;
    w.flush()
}

fn ingest(shared: &Shared, source: &Path, format: Option<Format>, role: Role, dedup: bool, ext: &[String]) -> Outcome {
    let dir = out_dir(shared)?;
    let mut opts = LoadOptions::new(infer_format(source, format), role.into());
    opts.dedup = dedup;
    if !ext.is_empty() {
        opts.extensions = ext.to_vec();
    }
    let loaded = load_corpus(source, &opts).map_err(|e| config_error(format!("{}: {e}", source.display())))?;
    fs::create_dir_all(&dir)?;
    let name = match role {
        Role::Training => "training.jsonl",
        Role::Heldout => "heldout.jsonl",
    };
    let path = dir.join(name);
    write_file(&path, |w| loaded.corpus.write_jsonl(w).map_err(io::Error::other))?;
    println!(
        "{}: {} documents, {} lines, {} invalid byte sequences replaced, digest {}",
        path.display(),
        loaded.corpus.len(),
        loaded.corpus.total_lines(),
        loaded.replaced_sequences,
        loaded.corpus.digest()
    );
    Ok(())
}

fn testbed(shared: &Shared, documents: Option<usize>, probes: Option<usize>) -> Outcome {
    let dir = out_dir(shared)?;
    let mut spec = TestbedSpec::default();
    if let Some(s) = shared.seed {
        spec.seed = s;
    }
    if let Some(d) = documents {
        spec.documents = d;
    }
    if let Some(p) = probes {
        spec.probes = p;
    }
    let tb = build_testbed(&spec).map_err(config_error)?;
    fs::create_dir_all(&dir)?;
    let jsonl = |name: &str, rows: Vec<serde_json::Value>| -> io::Result<()> {
        write_file(&dir.join(name), |w| {
            for r in rows {
                serde_json::to_writer(&mut *w, &r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    };
    write_file(&dir.join("training.jsonl"), |w| tb.training.write_jsonl(w).map_err(io::Error::other))?;
    write_file(&dir.join("heldout.jsonl"), |w| tb.heldout.write_jsonl(w).map_err(io::Error::other))?;
    jsonl("snippets.jsonl", tb.snippets.iter().map(|s| serde_json::to_value(s).expect("serializes")).collect())?;
    jsonl("probes.jsonl", tb.probes.iter().map(|p| serde_json::to_value(p).expect("serializes")).collect())?;
    println!(
        "{}: {} training documents, {} held-out, {} planted snippets, {} probes, digest {}",
        dir.display(),
        tb.training.len(),
        tb.heldout.len(),
        tb.snippets.len(),
        tb.probes.len(),
        tb.training.digest()
    );
    Ok(())
}

fn train(shared: &Shared, corpus: &Path, format: Option<Format>, order: usize, alpha: f64) -> Outcome {
    let dir = out_dir(shared)?;
    let opts = LoadOptions::new(infer_format(corpus, format), CorpusRole::Training);
    let loaded = load_corpus(corpus, &opts).map_err(|e| config_error(format!("{}: {e}", corpus.display())))?;
    let model = NGramModel::train(&loaded.corpus, order, alpha).map_err(config_error)?;
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("ngram-{order}.model"));
    write_file(&path, |w| model.write_to(w).map_err(io::Error::other))?;
    println!(
        "{}: order {order}, alpha {alpha}, {} tokens in vocabulary, {} contexts",
        path.display(),
        model.vocabulary().len(),
        model.context_count()
    );
    Ok(())
}

fn serve_info(model: Option<&Path>, endpoint: Option<&str>) -> Outcome {
    let handle = match (model, endpoint) {
        (Some(p), _) => {
            let f = fs::File::open(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            let m = NGramModel::read_from(BufReader::new(f)).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            let label = format!("ngram-{}", m.order());
            ProviderHandle::builtin(Arc::new(m), label)
        }
        (None, Some(e)) => ProviderHandle::remote(e, RemoteOptions::from_env()).map_err(provider_error)?,
        (None, None) => return Err(config_error("give --model or --endpoint")),
    };
    let probe = "def main():\n    return 0\n";
    let tokens = handle.encode(probe).map_err(provider_error)?;
    let round_trip = handle.decode(&tokens).map_err(provider_error)? == probe;
    let k = handle.meta().vocab_size.min(5);
    let dist = handle.next_distribution(&start_prompt(&handle)[0], k).map_err(provider_error)?;
    let info = serde_json::json!({
        "kind": format!("{:?}", handle.kind),
        "endpoint": handle.endpoint.as_ref().map(|u| u.to_string()),
        "meta": handle.meta(),
        "checks": {
            "tokenizer_round_trip": round_trip,
            "probe_tokens": tokens.len(),
            "first_token_candidates": dist.len(),
        },
    });
    println!("{}", serde_json::to_string_pretty(&info).map_err(internal_error)?);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum StageCommand {
    Generate,
    Detect,
    Metrics,
    Scan,
}

fn stage(shared: &Shared, which: StageCommand) -> Outcome {
    let cfg = load_config(shared)?;
    let inputs = load_inputs(&cfg.corpus)?;
    let run = AuditRun::new(&cfg, &inputs)?;
    let existing = || -> Result<Vec<_>, Failure> {
        run.load_outputs()?.ok_or_else(|| {
            config_error(format!("no {OUTPUTS_FILE} for this config in {}; run `generate` first", cfg.out_dir.display()))
        })
    };
    let dir = &cfg.out_dir;
    match which {
        StageCommand::Generate => {
            let models = build_models(&cfg.models, &inputs.training)?;
            let outputs = run.outputs(&models.audited)?;
            println!("{}: {} outputs", dir.join(OUTPUTS_FILE).display(), outputs.len());
        }
        StageCommand::Detect => {
            let (matches, segments) = run.detection(&existing()?)?;
            println!(
                "{}: {} unique segments; {}: {} matches",
                dir.join(SEGMENTS_FILE).display(),
                segments.len(),
                dir.join(MATCHES_FILE).display(),
                matches.len()
            );
        }
        StageCommand::Metrics => {
            let outputs = existing()?;
            let models = build_models(&cfg.models, &inputs.training)?;
            let scores = run.scores(&models, &outputs)?;
            println!("{}: {} scored outputs", dir.join(SCORES_FILE).display(), scores.len());
        }
        StageCommand::Scan => {
            let findings = run.findings(&existing()?)?;
            let live = findings.iter().filter(|f| !f.suppressed).count();
            println!(
                "{}: {live} findings ({} suppressed as trivial)",
                dir.join(FINDINGS_FILE).display(),
                findings.len() - live
            );
        }
    }
    Ok(())
}

fn builtin_alpha(spec: &ModelSpec) -> f64 {
    match spec {
        ModelSpec::Builtin { alpha, .. } => *alpha,
        _ => DEFAULT_BACKOFF_ALPHA,
    }
}

fn sweep(shared: &Shared, args: &SweepArgs) -> Outcome {
    let cfg = load_config(shared)?;
    let inputs = load_inputs(&cfg.corpus)?;
    let factor: Factor = args.factor.into();
    let training = &inputs.training;
    let fixed = cfg.generation.to_config();

    let mut handles: BTreeMap<usize, ProviderHandle> = BTreeMap::new();
    let base_order = match &cfg.models.audited {
        ModelSpec::Builtin { order, .. } => *order,
        _ => 0,
    };
    if factor == Factor::ModelOrder {
        let alpha = builtin_alpha(&cfg.models.audited);
        for &order in &args.values {
            let m = NGramModel::train(training, order, alpha).map_err(config_error)?;
            handles.insert(order, ProviderHandle::builtin(Arc::new(m), format!("ngram-{order}")));
        }
    } else {
        let models = build_models(&cfg.models, training)?;
        handles.insert(base_order, models.audited);
    }
    let prompt_model = handles.get(&base_order).or_else(|| handles.values().next()).expect("at least one model");
    let prompts = start_prompt(prompt_model);
    let models: BTreeMap<usize, &dyn LanguageModel> =
        handles.iter().map(|(&k, h)| (k, h as &dyn LanguageModel)).collect();
    let index = FingerprintIndex::build(training, cfg.window_lines, DEFAULT_SHARDS);
    let ctx = SweepContext::new(training, &index, models, base_order, prompts);
    let spec = SweepSpec { factor, values: args.values.clone(), fixed, corpus_ref: training.digest() };
    let rows = run_sweep(&spec, &ctx).map_err(|e| match e {
        memaudit::experiments::ExperimentError::Generate(g) => provider_error(g),
        other => config_error(other),
    })?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("sweep-{}.csv", factor.as_str()));
    write_file(&path, |w| write_sweep_csv(&rows, w))?;
    println!("{:<12} {:>10} {:>16} {:>14}", factor.as_str(), "value", "unique_segments", "total_matches");
    for r in &rows {
        println!("{:<12} {:>10} {:>16} {:>14}", "", r.value, r.unique_segments, r.total_matches);
    }
    println!("{}", path.display());
    Ok(())
}
