use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dqg_core::config::PipelineConfig;
use dqg_core::eval::{evaluate, load_qrels, load_run, Metric};
use dqg_core::{pipeline, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ENDPOINT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dqg", version, args_override_self = true, about = "Build synthetic ranker training data from a document collection")]
struct Cli {
    /// Flat `key = value` configuration file. Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Skip stages whose outputs already exist.
    #[arg(long, global = true)]
    resume: bool,
    /// Arbitrary `key=value` override, applied after the typed flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, filter and embed the corpus.
    Ingest(Opts),
    /// Fit the clustering (optionally after an elbow scan).
    Cluster(Opts),
    /// Choose the representative documents.
    Select(Opts),
    /// Generate one synthetic query per selected document.
    Generate(Opts),
    /// Index the collection and mine hard negatives.
    Mine(Opts),
    /// Write training files and the manifest.
    Build(Opts),
    /// Every stage from ingest to build.
    RunAll(Opts),
    /// Score a TREC run against qrels.
    Eval(EvalOpts),
}

/// Typed flags; each has the config key of the same name.
#[derive(Args, Debug, Default)]
struct Opts {
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    embeddings: Option<String>,
    #[arg(long = "out", visible_alias = "output-dir")]
    out: Option<String>,
    #[arg(long)]
    min_chars: Option<String>,
    #[arg(long)]
    hash_embed_dim: Option<String>,
    #[arg(long)]
    k: Option<String>,
    /// Inclusive range such as `2:10`.
    #[arg(long)]
    k_scan: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    restarts: Option<String>,
    #[arg(long)]
    n: Option<String>,
    /// Sampling temperature.
    #[arg(long = "temperature", short = 't')]
    temperature: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    /// Sampling rounds per cluster.
    #[arg(long = "rounds", short = 'm')]
    rounds: Option<String>,
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    decode_temperature: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<String>,
    #[arg(long)]
    x: Option<String>,
    #[arg(long)]
    num_neg: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `mock`, `mock-fail`, or a completion URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    template: Option<String>,
    /// JSONL file or `builtin:scidocs|nq|fiqa`.
    #[arg(long)]
    examples: Option<String>,
    #[arg(long)]
    concurrency: Option<String>,
}

impl Opts {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("corpus", &self.corpus),
            ("embeddings", &self.embeddings),
            ("output_dir", &self.out),
            ("min_chars", &self.min_chars),
            ("hash_embed_dim", &self.hash_embed_dim),
            ("k", &self.k),
            ("k_scan", &self.k_scan),
            ("max_iters", &self.max_iters),
            ("restarts", &self.restarts),
            ("n", &self.n),
            ("temperature", &self.temperature),
            ("lambda", &self.lambda),
            ("rounds", &self.rounds),
            ("shots", &self.shots),
            ("decode_temperature", &self.decode_temperature),
            ("max_new_tokens", &self.max_new_tokens),
            ("x", &self.x),
            ("num_neg", &self.num_neg),
            ("seed", &self.seed),
            ("endpoint", &self.endpoint),
            ("model", &self.model),
            ("template", &self.template),
            ("examples", &self.examples),
            ("concurrency", &self.concurrency),
        ]
    }
}

#[derive(Args, Debug)]
struct EvalOpts {
    /// TREC run file: `qid Q0 docid rank score tag`.
    #[arg(long)]
    run: PathBuf,
    /// TREC qrels file: `qid 0 docid grade`.
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated metrics.
    #[arg(long, default_value = "ndcg@10,recall@100", value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => EXIT_USAGE,
        Error::Endpoint(_) | Error::AllRequestsFailed { .. } => EXIT_ENDPOINT,
        _ => EXIT_DATA,
    }
}

fn config(cli: &Cli, opts: &Opts) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for (key, value) in opts.pairs() {
        if let Some(v) = value {
            cfg.apply(key, v)?;
        }
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.apply(k, v)?;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.resume |= cli.resume;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let stage = match &cli.command {
        Command::Eval(e) => return eval(e),
        Command::Ingest(o)
        | Command::Cluster(o)
        | Command::Select(o)
        | Command::Generate(o)
        | Command::Mine(o)
        | Command::Build(o)
        | Command::RunAll(o) => o,
    };
    let cfg = config(cli, stage)?;
    match &cli.command {
        Command::Ingest(_) => {
            let s = pipeline::ingest(&cfg)?;
            println!("ingested {} of {} documents", s.kept, s.loaded);
        }
        Command::Cluster(_) => {
            pipeline::ingest_if_needed(&cfg)?;
            let r = pipeline::cluster(&cfg)?;
            println!("K={} inertia={:.6} sse={:.6}", r.k, r.inertia, r.cosine_sse);
        }
        Command::Select(_) => println!("selected {} documents", pipeline::select(&cfg)?),
        Command::Generate(_) => {
            let s = pipeline::generate(&cfg)?;
            println!("generated {} queries, {} dropped", s.generated, s.failed);
        }
        Command::Mine(_) => {
            let r = pipeline::mine(&cfg)?;
            println!("mined {} pairs, {} skipped", r.pairs, r.skipped.len());
        }
        Command::Build(_) => print_manifest(&pipeline::build(&cfg)?),
        Command::RunAll(_) => print_manifest(&pipeline::run_all(&cfg)?),
        Command::Eval(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn print_manifest(m: &dqg_core::dataset::DatasetManifest) {
    println!(
        "{} pairs, {} negatives, {} dropped",
        m.counts.pairs, m.counts.negatives, m.counts.dropped
    );
}

fn eval(opts: &EvalOpts) -> Result<(), Failure> {
    let metrics = opts
        .metrics
        .iter()
        .map(|m| m.parse::<Metric>().map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let run = load_run(&opts.run)?;
    let qrels = load_qrels(&opts.qrels)?;
    let report = evaluate(&run, &qrels, &metrics);
    if opts.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
