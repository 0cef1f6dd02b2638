//! Few-shot prompt construction and one synthetic query per selected document.
//!
//! Completions come from a [`CompletionClient`]: either an HTTP endpoint
//! speaking the `{model, prompt, temperature, max_tokens, stop}` →
//! `{choices: [{text}]}` contract, or an in-process mock. Completions are
//! cleaned by [`parse_completion`] and otherwise kept as-is.

mod client;
pub mod mock;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use client::{CompletionClient, CompletionRequest, CompletionResponse, HttpClient, MockClient};

use crate::error::{Error, Result};

const DOCUMENT_SLOT: &str = "{document}";
const QUERY_SLOT: &str = "{query}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub preamble: String,
    /// Uses `{document}` and `{query}`.
    pub example_block: String,
    /// Uses `{document}` once and ends at the query cue.
    pub target_block: String,
    pub separator: String,
}

impl PromptTemplate {
    /// The default template: `Document:` / `Relevant Query:` blocks.
    pub fn inpars() -> Self {
        serde_json::from_str(include_str!("../../fixtures/prompts/inpars.json"))
            .expect("bundled template parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tmpl: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Template(format!("{}: {e}", path.display())))?;
        tmpl.validate()?;
        Ok(tmpl)
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.target_block.matches(DOCUMENT_SLOT).count();
        if slots != 1 {
            return Err(Error::Template(format!(
                "target block must contain {DOCUMENT_SLOT} exactly once, found {slots}"
            )));
        }
        if !self.example_block.contains(DOCUMENT_SLOT) {
            return Err(Error::Template(format!("example block is missing {DOCUMENT_SLOT}")));
        }
        if !self.example_block.contains(QUERY_SLOT) {
            return Err(Error::Template(format!("example block is missing {QUERY_SLOT}")));
        }
        Ok(())
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::inpars()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub document: String,
    pub query: String,
}

/// Reads `{"document": ..., "query": ...}` lines.
pub fn load_examples(path: &Path) -> Result<Vec<FewShotExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: FewShotExample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if ex.document.trim().is_empty() || ex.query.trim().is_empty() {
            return Err(parse_err("few-shot example with empty document or query".into()));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Bundled three-shot example sets: `scidocs`, `nq`, `fiqa`.
pub fn builtin_examples(name: &str) -> Option<Vec<FewShotExample>> {
    let src = match name {
        "scidocs" => include_str!("../../fixtures/prompts/scidocs.jsonl"),
        "nq" => include_str!("../../fixtures/prompts/nq.jsonl"),
        "fiqa" => include_str!("../../fixtures/prompts/fiqa.jsonl"),
        _ => return None,
    };
    Some(
        src.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("bundled examples parse"))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub max_doc_chars: usize,
    pub shots: usize,
    pub stop: Vec<String>,
    pub request_timeout: Duration,
    pub max_retries: usize,
    /// Delay before the first retry; doubles on each further attempt.
    pub retry_backoff: Duration,
    pub concurrency: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            model: "llama-2-7b-chat".into(),
            temperature: 0.0,
            max_new_tokens: 64,
            max_doc_chars: 2048,
            shots: 3,
            stop: vec!["\n".into()],
            request_timeout: Duration::from_secs(60),
            max_retries: 3,
            retry_backoff: Duration::from_millis(500),
            concurrency: 4,
        }
    }
}

/// Renders the preamble, the examples and the target block, joined by the
/// template separator. Empty preambles are omitted.
pub fn build_prompt(
    tmpl: &PromptTemplate,
    examples: &[FewShotExample],
    target_doc: &str,
    settings: &GenerationSettings,
) -> Result<String> {
    tmpl.validate()?;
    if examples.len() != settings.shots {
        return Err(Error::InvalidConfig(format!(
            "{} few-shot examples supplied for {} shots",
            examples.len(),
            settings.shots
        )));
    }
    let mut parts = Vec::with_capacity(examples.len() + 2);
    if !tmpl.preamble.is_empty() {
        parts.push(tmpl.preamble.clone());
    }
    for ex in examples {
        parts.push(
            tmpl.example_block
                .replace(DOCUMENT_SLOT, &ex.document)
                .replace(QUERY_SLOT, &ex.query),
        );
    }
    let doc = truncate_at_whitespace(target_doc, settings.max_doc_chars);
    parts.push(tmpl.target_block.replace(DOCUMENT_SLOT, doc));
    Ok(parts.join(&tmpl.separator))
}

/// Longest prefix of at most `max_chars` characters that ends at a
/// whitespace boundary. Falls back to a hard cut for a single long word.
pub fn truncate_at_whitespace(text: &str, max_chars: usize) -> &str {
    let Some((cut, _)) = text.char_indices().nth(max_chars) else {
        return text;
    };
    let head = &text[..cut];
    if text[cut..].starts_with(char::is_whitespace) {
        return head.trim_end();
    }
    match head.rfind(char::is_whitespace) {
        Some(ws) if !head[..ws].trim_end().is_empty() => head[..ws].trim_end(),
        _ => head,
    }
}

/// First line of the completion, trimmed, with one layer of surrounding
/// quotes removed.
pub fn parse_completion(raw: &str) -> Result<String> {
    let raw = raw.trim_start();
    let line = raw.lines().next().unwrap_or("").trim();
    let line = strip_quotes(line).trim();
    if line.is_empty() {
        return Err(Error::EmptyQuery);
    }
    Ok(line.to_owned())
}

fn strip_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')];
    for (open, close) in PAIRS {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner;
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticQuery {
    pub doc_id: String,
    pub query_text: String,
    pub raw_completion: String,
    pub model_name: String,
}

impl SyntheticQuery {
    pub fn record(&self) -> QueryRecord {
        QueryRecord {
            doc_id: self.doc_id.clone(),
            query: self.query_text.clone(),
            model: self.model_name.clone(),
        }
    }
}

/// One line of the persisted query file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub doc_id: String,
    pub query: String,
    pub model: String,
}

pub fn write_queries(path: &Path, records: &[QueryRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    read_jsonl(path)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// A prompt and the document it was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptItem {
    pub doc_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub doc_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationOutcome {
    /// Successful queries, in prompt order.
    pub queries: Vec<SyntheticQuery>,
    pub failures: Vec<GenerationFailure>,
}

/// Sends one completion request per prompt with at most
/// `settings.concurrency` in flight, retrying transport failures with
/// exponential backoff. Items that still fail, or whose completion cleans up
/// to nothing, are reported in `failures`; only a run where every item fails
/// is an error.
pub fn generate_queries(
    client: &dyn CompletionClient,
    prompts: &[PromptItem],
    settings: &GenerationSettings,
) -> Result<GenerationOutcome> {
    let slots: Vec<Mutex<Option<Result<String>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = settings.concurrency.max(1).min(prompts.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let result = complete_with_retries(client, &prompts[i].prompt, settings);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut outcome = GenerationOutcome::default();
    for (item, slot) in prompts.iter().zip(slots) {
        let result = slot.into_inner().unwrap().expect("every prompt was attempted");
        match result.and_then(|raw| parse_completion(&raw).map(|q| (raw, q))) {
            Ok((raw, query)) => outcome.queries.push(SyntheticQuery {
                doc_id: item.doc_id.clone(),
                query_text: query,
                raw_completion: raw,
                model_name: client.model_name().to_owned(),
            }),
            Err(e) => {
                log::warn!("dropping document {}: {e}", item.doc_id);
                outcome.failures.push(GenerationFailure {
                    doc_id: item.doc_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if !prompts.is_empty() && outcome.queries.is_empty() {
        return Err(Error::AllRequestsFailed {
            failed: outcome.failures.len(),
        });
    }
    Ok(outcome)
}

fn complete_with_retries(
    client: &dyn CompletionClient,
    prompt: &str,
    settings: &GenerationSettings,
) -> Result<String> {
    let request = CompletionRequest {
        model: settings.model.clone(),
        prompt: prompt.to_owned(),
        temperature: settings.temperature,
        max_tokens: settings.max_new_tokens,
        stop: settings.stop.clone(),
    };
    let mut delay = settings.retry_backoff;
    let mut attempt = 0;
    loop {
        match client.complete(&request) {
            Ok(text) => return Ok(text),
            Err(e) if attempt < settings.max_retries => {
                log::debug!("completion attempt {} failed: {e}", attempt + 1);
                std::thread::sleep(delay);
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}
