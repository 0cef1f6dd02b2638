//! Stage orchestration. Every stage reads its inputs from and writes its
//! outputs to the configured output directory, so stages can be re-entered
//! independently; with `resume` set, a stage whose outputs already exist is
//! skipped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{cosine_sse, elbow_scan, kmeans_fit, ElbowScan};
use crate::config::{PipelineConfig, API_KEY_ENV};
use crate::corpus::{filter_min_length, load_collection, Collection, CorpusFormat};
use crate::dataset::{write_dataset, DatasetManifest, MANIFEST_FILE};
use crate::embed::{check_alignment, hash_embed_collection, load_embeddings, read_ids_sidecar, write_ids_sidecar};
use crate::error::{Error, Result};
use crate::mine::{assemble_pairs, build_index_with, read_pairs, write_pairs};
use crate::querygen::{
    self, build_prompt, builtin_examples, generate_queries, load_examples, CompletionClient,
    GenerationFailure, HttpClient, MockClient, PromptItem, PromptTemplate,
};
use crate::select::{read_selected, select_representatives, write_selected};
use crate::{Embeddings, KMeansModel};

pub const COLLECTION_FILE: &str = "collection.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const MODEL_FILE: &str = "kmeans.bin";
pub const CLUSTER_REPORT_FILE: &str = "cluster.json";
pub const ELBOW_FILE: &str = "elbow.csv";
pub const SELECTED_FILE: &str = "selected.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const FAILURES_FILE: &str = "generation_failures.jsonl";
pub const INDEX_FILE: &str = "bm25.idx";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const MINING_REPORT_FILE: &str = "mining.json";

/// Words taken from the target document by the built-in `mock` endpoint.
pub const MOCK_QUERY_WORDS: usize = 8;

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn skip(cfg: &PipelineConfig, outputs: &[&str], stage: &str) -> bool {
    let done = cfg.resume && outputs.iter().all(|f| out(cfg, f).exists());
    if done {
        log::info!("{stage}: outputs present, skipping");
    }
    done
}

/// Runs `f` on a rayon pool sized by `cfg.threads`, or the global pool.
pub fn with_threads<T: Send>(cfg: &PipelineConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_filtered_collection(cfg: &PipelineConfig) -> Result<Collection> {
    load_collection(&out(cfg, COLLECTION_FILE), CorpusFormat::Jsonl)
}

pub fn load_stage_embeddings(cfg: &PipelineConfig, collection: &Collection) -> Result<Embeddings> {
    let path = out(cfg, EMBEDDINGS_FILE);
    let x = load_embeddings(&path)?;
    let ids = read_ids_sidecar(&path)?;
    check_alignment(&x, ids.as_deref(), collection)?;
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub loaded: usize,
    pub kept: usize,
    pub hash_embedded: bool,
}

/// Loads and filters the corpus, then writes the filtered collection and
/// an embedding file aligned with it.
///
/// External embeddings may cover either the filtered collection or, when
/// they carry an `.ids` sidecar, the full corpus; in the latter case the
/// surviving rows are picked by id.
pub fn ingest(cfg: &PipelineConfig) -> Result<IngestSummary> {
    let corpus = cfg
        .corpus
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("no corpus configured".into()))?;
    ensure_dir(&cfg.output_dir)?;
    let full = load_collection(corpus, CorpusFormat::Jsonl)?;
    let kept = filter_min_length(&full, cfg.min_chars);
    log::info!(
        "ingest: kept {} of {} documents with at least {} characters",
        kept.len(),
        full.len(),
        cfg.min_chars
    );
    let emb_path = out(cfg, EMBEDDINGS_FILE);
    let x: Embeddings = match &cfg.embeddings {
        Some(path) => aligned_external(path, &full, &kept)?,
        None => with_threads(cfg, || hash_embed_collection(&kept, cfg.hash_embed_dim, cfg.seed))??,
    };
    kept.save_jsonl(&out(cfg, COLLECTION_FILE))?;
    x.save(&emb_path)?;
    write_ids_sidecar(&emb_path, kept.ids())?;
    Ok(IngestSummary {
        loaded: full.len(),
        kept: kept.len(),
        hash_embedded: cfg.embeddings.is_none(),
    })
}

fn aligned_external(path: &Path, full: &Collection, kept: &Collection) -> Result<Embeddings> {
    let x: Embeddings = load_embeddings(path)?;
    let ids = read_ids_sidecar(path)?;
    if x.rows() == kept.len() {
        check_alignment(&x, ids.as_deref(), kept)?;
        return Ok(x);
    }
    let Some(ids) = ids else {
        return Err(Error::Alignment(format!(
            "{}: {} embedding rows, but {} documents survive filtering (of {} loaded) and there is no .ids sidecar",
            path.display(),
            x.rows(),
            kept.len(),
            full.len()
        )));
    };
    if ids.len() != x.rows() {
        return Err(Error::Alignment(format!(
            "{}: {} sidecar ids for {} rows",
            path.display(),
            ids.len(),
            x.rows()
        )));
    }
    let by_id: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut data = Vec::with_capacity(kept.len() * x.dim());
    for id in kept.ids() {
        let row = by_id.get(id).ok_or_else(|| {
            Error::Alignment(format!("{}: no embedding for document {id:?}", path.display()))
        })?;
        data.extend_from_slice(x.row(*row));
    }
    Embeddings::new(kept.len(), x.dim(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub inertia: f64,
    pub cosine_sse: f64,
    pub iterations: usize,
    pub knee: Option<usize>,
}

/// Fits the clustering, optionally choosing K by an elbow scan first.
pub fn cluster(cfg: &PipelineConfig) -> Result<ClusterReport> {
    if skip(cfg, &[MODEL_FILE, CLUSTER_REPORT_FILE], "cluster") {
        return read_json(&out(cfg, CLUSTER_REPORT_FILE));
    }
    let collection = load_filtered_collection(cfg)?;
    let x = load_stage_embeddings(cfg, &collection)?;
    with_threads(cfg, || -> Result<ClusterReport> {
        let mut k = cfg.k;
        let mut knee = None;
        if let Some((lo, hi)) = cfg.k_scan {
            let hi = hi.min(x.rows());
            let ks: Vec<usize> = (lo..=hi).collect();
            let scan: ElbowScan = elbow_scan(&x, &ks, &cfg.clustering())?;
            fs::write(out(cfg, ELBOW_FILE), scan.to_csv()).map_err(|e| Error::io(out(cfg, ELBOW_FILE), e))?;
            knee = scan.knee;
            if let Some(kk) = knee {
                k = kk;
            }
            log::info!("elbow scan {lo}..={hi}: knee at {knee:?}, fitting K={k}");
        }
        let model = kmeans_fit(&x, &crate::cluster::ClusteringConfig { k, ..cfg.clustering() })?;
        model.save(&out(cfg, MODEL_FILE))?;
        let report = ClusterReport {
            k,
            inertia: model.inertia(),
            cosine_sse: cosine_sse(&x, &model),
            iterations: model.history().len(),
            knee,
        };
        log::info!(
            "cluster: K={} inertia={:.6} sse={:.6}",
            report.k,
            report.inertia,
            report.cosine_sse
        );
        write_json(&out(cfg, CLUSTER_REPORT_FILE), &report)?;
        Ok(report)
    })?
}

/// Writes the selected documents with their provenance. Returns the count.
pub fn select(cfg: &PipelineConfig) -> Result<usize> {
    if skip(cfg, &[SELECTED_FILE], "select") {
        return Ok(read_selected(&out(cfg, SELECTED_FILE))?.len());
    }
    let collection = load_filtered_collection(cfg)?;
    let x = load_stage_embeddings(cfg, &collection)?;
    if cfg.n > collection.len() {
        return Err(Error::InfeasibleBudget(format!(
            "N = {} exceeds the {} filtered documents",
            cfg.n,
            collection.len()
        )));
    }
    let model = KMeansModel::load(&out(cfg, MODEL_FILE), &x)?;
    let selected = with_threads(cfg, || select_representatives(&x, &model, &cfg.sampling()))??;
    let records = selected.records(&collection)?;
    write_selected(&out(cfg, SELECTED_FILE), &records)?;
    log::info!("select: {} documents over {} clusters", records.len(), model.k());
    Ok(records.len())
}

/// Builds the completion client named by `cfg.endpoint`.
pub fn client_for(cfg: &PipelineConfig) -> Result<Box<dyn CompletionClient>> {
    let endpoint = cfg
        .endpoint
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("no LLM endpoint configured".into()))?;
    match endpoint {
        "mock" => Ok(Box::new(MockClient::DocumentPrefix {
            words: MOCK_QUERY_WORDS,
        })),
        "mock-fail" => Ok(Box::new(MockClient::Failing)),
        url if url.starts_with("http://") || url.starts_with("https://") => Ok(Box::new(
            HttpClient::new(url, cfg.model.clone(), cfg.generation().request_timeout)
                .with_api_key(std::env::var(API_KEY_ENV).ok()),
        )),
        other => Err(Error::InvalidConfig(format!("unsupported endpoint {other:?}"))),
    }
}

fn few_shot_examples(cfg: &PipelineConfig) -> Result<Vec<querygen::FewShotExample>> {
    let mut examples = match cfg.examples.as_deref() {
        None if cfg.shots == 0 => Vec::new(),
        None => return Err(Error::InvalidConfig("no few-shot examples configured".into())),
        Some(source) => match source.strip_prefix("builtin:") {
            Some(name) => builtin_examples(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown built-in examples {name:?}")))?,
            None => load_examples(Path::new(source))?,
        },
    };
    if examples.len() < cfg.shots {
        return Err(Error::InvalidConfig(format!(
            "{} few-shot examples available for {} shots",
            examples.len(),
            cfg.shots
        )));
    }
    examples.truncate(cfg.shots);
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub requested: usize,
    pub generated: usize,
    pub failed: usize,
}

pub fn generate(cfg: &PipelineConfig) -> Result<GenerateSummary> {
    let client = client_for(cfg)?;
    generate_with(cfg, client.as_ref())
}

/// Prompts `client` once per selected document, in selection order.
pub fn generate_with(cfg: &PipelineConfig, client: &dyn CompletionClient) -> Result<GenerateSummary> {
    if skip(cfg, &[QUERIES_FILE, FAILURES_FILE], "generate") {
        let generated = querygen::read_queries(&out(cfg, QUERIES_FILE))?.len();
        let failed = querygen::read_jsonl::<GenerationFailure>(&out(cfg, FAILURES_FILE))?.len();
        return Ok(GenerateSummary {
            requested: generated + failed,
            generated,
            failed,
        });
    }
    let collection = load_filtered_collection(cfg)?;
    let selected = read_selected(&out(cfg, SELECTED_FILE))?;
    let template = match &cfg.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::inpars(),
    };
    let examples = few_shot_examples(cfg)?;
    let settings = cfg.generation();
    let prompts = selected
        .iter()
        .map(|r| {
            let doc = collection
                .by_id(&r.doc_id)
                .ok_or_else(|| Error::Alignment(format!("selected document {:?} not in collection", r.doc_id)))?;
            Ok(PromptItem {
                doc_id: r.doc_id.clone(),
                prompt: build_prompt(&template, &examples, &doc.render(), &settings)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = generate_queries(client, &prompts, &settings)?;
    let records: Vec<_> = outcome.queries.iter().map(|q| q.record()).collect();
    querygen::write_queries(&out(cfg, QUERIES_FILE), &records)?;
    querygen::write_jsonl(&out(cfg, FAILURES_FILE), &outcome.failures)?;
    log::info!(
        "generate: {} queries, {} dropped",
        records.len(),
        outcome.failures.len()
    );
    Ok(GenerateSummary {
        requested: prompts.len(),
        generated: records.len(),
        failed: outcome.failures.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningReport {
    pub pairs: usize,
    pub skipped: Vec<String>,
}

/// Indexes the filtered collection and mines negatives for every query.
pub fn mine(cfg: &PipelineConfig) -> Result<MiningReport> {
    if skip(cfg, &[INDEX_FILE, PAIRS_FILE, MINING_REPORT_FILE], "mine") {
        return read_json(&out(cfg, MINING_REPORT_FILE));
    }
    let collection = load_filtered_collection(cfg)?;
    let queries = querygen::read_queries(&out(cfg, QUERIES_FILE))?;
    let assembly = with_threads(cfg, || -> Result<_> {
        let index = build_index_with(&collection, cfg.bm25());
        index.save(&out(cfg, INDEX_FILE))?;
        assemble_pairs(&queries, &collection, &index, &cfg.mining())
    })??;
    write_pairs(&out(cfg, PAIRS_FILE), &assembly.pairs)?;
    let report = MiningReport {
        pairs: assembly.pairs.len(),
        skipped: assembly.skipped,
    };
    write_json(&out(cfg, MINING_REPORT_FILE), &report)?;
    log::info!("mine: {} pairs, {} skipped", report.pairs, report.skipped.len());
    Ok(report)
}

/// Emits the training files and the manifest.
pub fn build(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    if skip(cfg, &[MANIFEST_FILE], "build") {
        return DatasetManifest::load(&out(cfg, MANIFEST_FILE));
    }
    let collection = load_filtered_collection(cfg)?;
    let pairs = read_pairs(&out(cfg, PAIRS_FILE))?;
    let mut dropped = 0;
    let failures = out(cfg, FAILURES_FILE);
    if failures.exists() {
        dropped += querygen::read_jsonl::<GenerationFailure>(&failures)?.len();
    }
    let mining = out(cfg, MINING_REPORT_FILE);
    if mining.exists() {
        dropped += read_json::<MiningReport>(&mining)?.skipped.len();
    }
    let manifest = write_dataset(&pairs, &collection, &cfg.output_dir, dropped, cfg.snapshot())?;
    log::info!(
        "build: {} pairs, {} negatives",
        manifest.counts.pairs,
        manifest.counts.negatives
    );
    Ok(manifest)
}

/// Runs ingest unless its outputs can be reused: either `resume` is set
/// and they exist, or no corpus is configured and they exist.
pub fn ingest_if_needed(cfg: &PipelineConfig) -> Result<()> {
    let present = out(cfg, COLLECTION_FILE).exists() && out(cfg, EMBEDDINGS_FILE).exists();
    if present && (cfg.resume || cfg.corpus.is_none()) {
        return Ok(());
    }
    ingest(cfg).map(|_| ())
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    ingest_if_needed(cfg)?;
    cluster(cfg)?;
    select(cfg)?;
    generate(cfg)?;
    mine(cfg)?;
    build(cfg)
}
