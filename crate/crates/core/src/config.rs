//! Pipeline configuration.
//!
//! Config files are flat `key = value` lines; `#` starts a comment and
//! surrounding quotes on values are optional. The same keys are accepted as
//! command-line overrides, with `-` and `_` interchangeable.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::cluster::ClusteringConfig;
use crate::error::{Error, Result};
use crate::mine::{Bm25Params, MiningConfig};
use crate::querygen::GenerationSettings;
use crate::select::SamplingConfig;

/// Environment variable holding the LLM endpoint's API key.
pub const API_KEY_ENV: &str = "DQG_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    /// External embeddings; when absent the hash embedder is used.
    pub embeddings: Option<PathBuf>,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub min_chars: usize,
    pub hash_embed_dim: usize,
    pub k: usize,
    /// Inclusive K range for an elbow scan.
    pub k_scan: Option<(usize, usize)>,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub n: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub rounds: usize,
    pub shots: usize,
    pub decode_temperature: f64,
    pub max_new_tokens: usize,
    pub max_doc_chars: usize,
    pub x: usize,
    pub num_neg: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub seed: u64,
    /// `mock`, `mock-fail`, or an HTTP(S) completion URL.
    pub endpoint: Option<String>,
    pub model: String,
    pub template: Option<PathBuf>,
    /// A JSONL file, or `builtin:scidocs|nq|fiqa`.
    pub examples: Option<String>,
    pub concurrency: usize,
    pub max_retries: usize,
    pub request_timeout_secs: u64,
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub resume: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let clustering = ClusteringConfig::default();
        let sampling = SamplingConfig::default();
        let generation = GenerationSettings::default();
        let mining = MiningConfig::default();
        let bm25 = Bm25Params::default();
        Self {
            corpus: None,
            embeddings: None,
            output_dir: PathBuf::from("out"),
            min_chars: crate::corpus::DEFAULT_MIN_CHARS,
            hash_embed_dim: 256,
            k: clustering.k,
            k_scan: None,
            max_iters: clustering.max_iters,
            tol: clustering.tol,
            restarts: clustering.restarts,
            n: sampling.n,
            temperature: sampling.temperature,
            lambda: sampling.lambda,
            rounds: sampling.rounds,
            shots: generation.shots,
            decode_temperature: generation.temperature,
            max_new_tokens: generation.max_new_tokens,
            max_doc_chars: generation.max_doc_chars,
            x: mining.x,
            num_neg: mining.num_neg,
            bm25_k1: bm25.k1,
            bm25_b: bm25.b,
            seed: 0,
            endpoint: None,
            model: generation.model,
            template: None,
            examples: None,
            concurrency: generation.concurrency,
            max_retries: generation.max_retries,
            request_timeout_secs: generation.request_timeout.as_secs(),
            threads: None,
            resume: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

fn optional(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_owned())
}

impl PipelineConfig {
    /// Sets one key from its textual value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let v = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        match key.as_str() {
            "corpus" => self.corpus = optional(v).map(PathBuf::from),
            "embeddings" => self.embeddings = optional(v).map(PathBuf::from),
            "output_dir" | "out" => self.output_dir = PathBuf::from(v),
            "min_chars" => self.min_chars = parse(&key, v)?,
            "hash_embed_dim" => self.hash_embed_dim = parse(&key, v)?,
            "k" => self.k = parse(&key, v)?,
            "k_scan" => self.k_scan = if v.is_empty() { None } else { Some(parse_range(v)?) },
            "max_iters" => self.max_iters = parse(&key, v)?,
            "tol" => self.tol = parse(&key, v)?,
            "restarts" => self.restarts = parse(&key, v)?,
            "n" => self.n = parse(&key, v)?,
            "temperature" | "t" => self.temperature = parse(&key, v)?,
            "lambda" => self.lambda = parse(&key, v)?,
            "rounds" | "m" => self.rounds = parse(&key, v)?,
            "shots" => self.shots = parse(&key, v)?,
            "decode_temperature" => self.decode_temperature = parse(&key, v)?,
            "max_new_tokens" => self.max_new_tokens = parse(&key, v)?,
            "max_doc_chars" => self.max_doc_chars = parse(&key, v)?,
            "x" => self.x = parse(&key, v)?,
            "num_neg" => self.num_neg = parse(&key, v)?,
            "bm25_k1" => self.bm25_k1 = parse(&key, v)?,
            "bm25_b" => self.bm25_b = parse(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "endpoint" => self.endpoint = optional(v),
            "model" => self.model = v.to_owned(),
            "template" => self.template = optional(v).map(PathBuf::from),
            "examples" => self.examples = optional(v),
            "concurrency" => self.concurrency = parse(&key, v)?,
            "max_retries" => self.max_retries = parse(&key, v)?,
            "request_timeout_secs" => self.request_timeout_secs = parse(&key, v)?,
            "threads" => self.threads = if v.is_empty() { None } else { Some(parse(&key, v)?) },
            "resume" => self.resume = parse(&key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            self.apply(key, value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Bounds owned by the individual stages, checked up front.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if let Some((lo, hi)) = self.k_scan {
            if lo == 0 || lo > hi {
                return bad(format!("k_scan {lo}:{hi} is not an ascending range of positive K"));
            }
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return bad("max_iters and restarts must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.decode_temperature >= 0.0) {
            return bad("decode_temperature must be non-negative".into());
        }
        if self.hash_embed_dim < 8 {
            return bad("hash_embed_dim must be at least 8".into());
        }
        self.mining().validate()?;
        Ok(())
    }

    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            k: self.k,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            restarts: self.restarts,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            rounds: self.rounds,
            lambda: self.lambda,
            n: self.n,
            seed: self.seed,
        }
    }

    pub fn generation(&self) -> GenerationSettings {
        GenerationSettings {
            model: self.model.clone(),
            temperature: self.decode_temperature,
            max_new_tokens: self.max_new_tokens,
            max_doc_chars: self.max_doc_chars,
            shots: self.shots,
            request_timeout: std::time::Duration::from_secs(self.request_timeout_secs),
            max_retries: self.max_retries,
            concurrency: self.concurrency,
            ..GenerationSettings::default()
        }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            x: self.x,
            num_neg: self.num_neg,
        }
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }

    /// The effective configuration as recorded in the dataset manifest.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_text(&self) -> String {
        let snapshot = self.snapshot();
        let mut out = String::new();
        for (k, v) in snapshot.as_object().expect("struct") {
            let v = match v {
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(a) if a.len() == 2 => format!("{}:{}", a[0], a[1]),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        out
    }
}

fn parse_range(v: &str) -> Result<(usize, usize)> {
    let (lo, hi) = v
        .split_once(':')
        .ok_or_else(|| Error::InvalidConfig(format!("k_scan {v:?} should look like 2:10")))?;
    Ok((parse("k_scan", lo.trim())?, parse("k_scan", hi.trim())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn file_then_overrides() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(
            "# demo\nk = 50\nk-scan = 2:10\nendpoint = \"mock\"\nlambda=0.5 # trailing\n",
            Path::new("cfg"),
        )
        .unwrap();
        assert_eq!(cfg.k, 50);
        assert_eq!(cfg.k_scan, Some((2, 10)));
        assert_eq!(cfg.endpoint.as_deref(), Some("mock"));
        assert_eq!(cfg.lambda, 0.5);
        cfg.apply("k", "7").unwrap();
        assert_eq!(cfg.k, 7);
    }

    #[test]
    fn bad_lines() {
        let mut cfg = PipelineConfig::default();
        assert!(matches!(
            cfg.apply_text("k = 5\nnonsense\n", Path::new("c")),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(cfg.apply("unknown", "1").is_err());
        assert!(cfg.apply("k", "abc").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.apply("k_scan", "3:9").unwrap();
        cfg.apply("examples", "builtin:nq").unwrap();
        let mut back = PipelineConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn snapshot_omits_run_local_fields() {
        let snap = PipelineConfig::default().snapshot();
        assert!(snap.get("output_dir").is_none());
        assert!(snap.get("threads").is_none());
        assert_eq!(snap["k"], 1000);
    }
}
