//! Training-file emission: retriever triples, reranker pointwise labels and
//! a manifest that pins counts, configuration and file digests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Collection, Document};
use crate::error::{Error, Result};
use crate::mine::TrainingPair;
use crate::text::flatten_whitespace;

pub const TRIPLES_FILE: &str = "triples.tsv";
pub const POINTWISE_FILE: &str = "pointwise.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

fn lookup<'a>(c: &'a Collection, id: &str) -> Result<&'a Document> {
    c.by_id(id)
        .ok_or_else(|| Error::Alignment(format!("training pair references unknown document {id:?}")))
}

/// One `query \t positive \t negative` line per negative. Tabs and line
/// breaks inside any field become spaces. Returns the number of lines.
pub fn write_triples(pairs: &[TrainingPair], c: &Collection, path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut lines = 0;
    for pair in pairs {
        let query = flatten_whitespace(&pair.query);
        let positive = flatten_whitespace(&lookup(c, &pair.positive_doc_id)?.render());
        for neg in &pair.negative_doc_ids {
            let negative = flatten_whitespace(&lookup(c, neg)?.render());
            writeln!(w, "{query}\t{positive}\t{negative}").map_err(|e| Error::io(path, e))?;
            lines += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(lines)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointwiseRecord {
    pub query: String,
    pub doc_id: String,
    pub doc_text: String,
    pub label: u8,
}

/// The positive (label 1) followed by each negative (label 0), per pair.
pub fn write_pointwise(pairs: &[TrainingPair], c: &Collection, path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut lines = 0;
    for pair in pairs {
        let labelled = std::iter::once((&pair.positive_doc_id, 1u8))
            .chain(pair.negative_doc_ids.iter().map(|n| (n, 0u8)));
        for (id, label) in labelled {
            let record = PointwiseRecord {
                query: pair.query.clone(),
                doc_id: id.clone(),
                doc_text: lookup(c, id)?.render(),
                label,
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            lines += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(lines)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub pairs: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Documents that produced no training pair.
    pub dropped: usize,
    /// Pairs with fewer negatives than requested.
    pub shortfall: usize,
}

impl DatasetCounts {
    pub fn of(pairs: &[TrainingPair], dropped: usize) -> Self {
        Self {
            pairs: pairs.len(),
            positives: pairs.len(),
            negatives: pairs.iter().map(|p| p.negative_doc_ids.len()).sum(),
            dropped,
            shortfall: pairs.iter().filter(|p| p.shortfall).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub sha256: String,
    pub lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: DatasetCounts,
    pub config: serde_json::Value,
    pub files: BTreeMap<String, FileDigest>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        sha256: hex::encode(Sha256::digest(&bytes)),
        lines: bytes.iter().filter(|&&b| b == b'\n').count(),
    })
}

/// Writes both training files and the manifest into `dir`.
pub fn write_dataset(
    pairs: &[TrainingPair],
    c: &Collection,
    dir: &Path,
    dropped: usize,
    config: serde_json::Value,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let triples = dir.join(TRIPLES_FILE);
    let pointwise = dir.join(POINTWISE_FILE);
    write_triples(pairs, c, &triples)?;
    write_pointwise(pairs, c, &pointwise)?;
    let mut files = BTreeMap::new();
    files.insert(TRIPLES_FILE.to_owned(), file_digest(&triples)?);
    files.insert(POINTWISE_FILE.to_owned(), file_digest(&pointwise)?);
    let manifest = DatasetManifest {
        counts: DatasetCounts::of(pairs, dropped),
        config,
        files,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
