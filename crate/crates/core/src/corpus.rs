//! BEIR-style document collections.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default length threshold for [`filter_min_length`], in characters.
pub const DEFAULT_MIN_CHARS: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Title, a single space, then text; just the text when the title is empty.
    pub fn render(&self) -> String {
        render_document(self)
    }
}

pub fn render_document(d: &Document) -> String {
    if d.title.is_empty() {
        d.text.clone()
    } else {
        let mut s = String::with_capacity(d.title.len() + 1 + d.text.len());
        s.push_str(&d.title);
        s.push(' ');
        s.push_str(&d.text);
        s
    }
}

/// Supported corpus encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

/// An ordered, id-indexed set of documents. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collection {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Collection {
    /// Fails on an empty id, an interior NUL, or a repeated id.
    pub fn from_docs(docs: Vec<Document>) -> Result<Self> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            validate(d)?;
            if index.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self { docs, index })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, ordinal: usize) -> Option<&Document> {
        self.docs.get(ordinal)
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Document> {
        self.ordinal(id).map(|i| &self.docs[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.id.as_str())
    }

    /// Writes the collection back out as JSONL with `_id`, `title`, `text`.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for d in &self.docs {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a Collection {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.docs.iter()
    }
}

fn validate(d: &Document) -> Result<()> {
    if d.id.is_empty() {
        return Err(Error::Validation("document with empty _id".into()));
    }
    if d.id.contains('\0') || d.title.contains('\0') || d.text.contains('\0') {
        return Err(Error::Validation(format!(
            "document {:?} contains a NUL byte",
            d.id
        )));
    }
    Ok(())
}

pub fn load_collection(path: &Path, format: CorpusFormat) -> Result<Collection> {
    match format {
        CorpusFormat::Jsonl => load_jsonl(path),
    }
}

fn load_jsonl(path: &Path) -> Result<Collection> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut index = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        validate(&doc).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if index.insert(doc.id.clone(), docs.len()).is_some() {
            return Err(Error::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(Collection { docs, index })
}

/// Keeps documents whose rendered form has at least `min_chars` Unicode
/// scalar values. Order is preserved.
pub fn filter_min_length(c: &Collection, min_chars: usize) -> Collection {
    let docs: Vec<Document> = c
        .docs
        .iter()
        .filter(|d| rendered_len(d) >= min_chars)
        .cloned()
        .collect();
    let index = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id.clone(), i))
        .collect();
    Collection { docs, index }
}

fn rendered_len(d: &Document) -> usize {
    let title = d.title.chars().count();
    let text = d.text.chars().count();
    if title == 0 {
        text
    } else {
        title + 1 + text
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_loads_empty_collection() {
        let f = write_tmp("");
        let c = load_collection(f.path(), CorpusFormat::Jsonl).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn three_line_fixture() {
        let f = write_tmp(concat!(
            r#"{"_id": "a", "title": "T", "text": "one"}"#,
            "\n",
            r#"{"_id": "b", "text": "two"}"#,
            "\n",
            r#"{"_id": "c", "title": "", "text": "three", "metadata": {}}"#,
            "\n"
        ));
        let c = load_collection(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.ordinal("a"), Some(0));
        assert_eq!(c.ordinal("b"), Some(1));
        assert_eq!(c.ordinal("c"), Some(2));
        assert_eq!(c.by_id("b").unwrap().title, "");
        assert_eq!(c.get(0).unwrap().text, "one");
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let f = write_tmp(concat!(
            r#"{"_id": "a", "text": "x"}"#,
            "\n",
            r#"{"_id": "a", "text": "y"}"#,
            "\n"
        ));
        match load_collection(f.path(), CorpusFormat::Jsonl) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(concat!(r#"{"_id": "a", "text": "x"}"#, "\n", "{not json\n"));
        match load_collection(f.path(), CorpusFormat::Jsonl) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_text_is_a_parse_error() {
        let f = write_tmp(r#"{"_id": "a", "title": "x"}"#);
        assert!(matches!(
            load_collection(f.path(), CorpusFormat::Jsonl),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn render_rules() {
        assert_eq!(render_document(&Document::new("1", "A", "b")), "A b");
        assert_eq!(render_document(&Document::new("1", "", "b")), "b");
    }

    #[test]
    fn render_scifact_style_doc() {
        let title = "Microstructural development of human newborn cerebral white matter assessed in vivo by diffusion tensor magnetic resonance imaging.";
        let text = "Alterations of the architecture of cerebral white matter in the developing human brain can affect cortical development and result in functional disabilities.";
        let d = Document::new("4983", title, text);
        let expected = format!("{title} {text}");
        assert_eq!(d.render(), expected);
    }

    fn doc_of_len(id: &str, n: usize) -> Document {
        Document::new(id, "", "x".repeat(n))
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = Collection::from_docs(vec![doc_of_len("a", 299)]).unwrap();
        assert!(filter_min_length(&c, DEFAULT_MIN_CHARS).is_empty());
        let c =
            Collection::from_docs(vec![doc_of_len("a", 100), doc_of_len("b", 300), doc_of_len("c", 301)])
                .unwrap();
        let kept = filter_min_length(&c, 300);
        assert_eq!(kept.ids().collect::<Vec<_>>(), vec!["b", "c"]);
        assert_eq!(kept.ordinal("b"), Some(0));
        assert_eq!(filter_min_length(&c, 0), c);
    }

    #[test]
    fn title_counts_toward_length() {
        // 5 + 1 + 4 = 10
        let c = Collection::from_docs(vec![Document::new("a", "title", "text")]).unwrap();
        assert_eq!(filter_min_length(&c, 10).len(), 1);
        assert_eq!(filter_min_length(&c, 11).len(), 0);
    }

    #[test]
    fn length_counts_scalar_values_not_bytes() {
        let c = Collection::from_docs(vec![Document::new("a", "", "é".repeat(5))]).unwrap();
        assert_eq!(filter_min_length(&c, 5).len(), 1);
        assert_eq!(filter_min_length(&c, 6).len(), 0);
    }

    #[test]
    fn nul_bytes_rejected() {
        assert!(Collection::from_docs(vec![Document::new("a", "", "x\0y")]).is_err());
    }
}
