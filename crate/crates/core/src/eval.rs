//! nDCG@k and recall@k over TREC-format runs and judgments.
//!
//! nDCG uses linear gain with a `log2(rank + 1)` discount. Queries without
//! any relevant document score 0 for nDCG and are left out of the recall
//! mean. Run queries missing from the judgments are skipped entirely.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query id → documents, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub queries: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    /// Sorts each ranking by score descending, doc id ascending on ties.
    pub fn from_unsorted(mut queries: BTreeMap<String, Vec<(String, f64)>>) -> Self {
        for ranking in queries.values_mut() {
            ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        }
        Self { queries }
    }
}

/// Query id → doc id → relevance grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    pub queries: BTreeMap<String, BTreeMap<String, u32>>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// `qid Q0 docid rank score tag` per line; the rank column is ignored in
/// favour of the score.
pub fn load_run(path: &Path) -> Result<Run> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, path)
}

pub fn parse_run(text: &str, path: &Path) -> Result<Run> {
    let mut queries: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(parse_err(path, i + 1, format!("expected 6 fields, found {}", fields.len())));
        }
        fields[3]
            .parse::<u64>()
            .map_err(|_| parse_err(path, i + 1, format!("bad rank {:?}", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_err(path, i + 1, format!("bad score {:?}", fields[4])))?;
        let (qid, doc) = (fields[0].to_owned(), fields[2].to_owned());
        if !seen.insert((qid.clone(), doc.clone())) {
            return Err(parse_err(path, i + 1, format!("document {doc} repeated for query {qid}")));
        }
        queries.entry(qid).or_default().push((doc, score));
    }
    Ok(Run::from_unsorted(queries))
}

/// `qid 0 docid grade` per line.
pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&text, path)
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut queries: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(parse_err(path, i + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad grade {:?}", fields[3])))?;
        queries
            .entry(fields[0].to_owned())
            .or_default()
            .insert(fields[2].to_owned(), grade);
    }
    Ok(Qrels { queries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, k) = lower
            .split_once('@')
            .ok_or_else(|| Error::InvalidConfig(format!("metric {s:?} should look like ndcg@10")))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::InvalidConfig(format!("bad cutoff in metric {s:?}")))?;
        match name {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" | "r" => Ok(Metric::Recall(k)),
            _ => Err(Error::InvalidConfig(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Run queries with no judgments.
    pub skipped: Vec<String>,
}

fn finish(per_query: BTreeMap<String, f64>, skipped: Vec<String>) -> MetricReport {
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    MetricReport {
        per_query,
        mean,
        skipped,
    }
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricReport {
    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    for (qid, ranking) in &run.queries {
        let Some(judged) = qrels.queries.get(qid) else {
            log::warn!("query {qid} has no judgments; skipped");
            skipped.push(qid.clone());
            continue;
        };
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (doc, _))| judged.get(doc).copied().unwrap_or(0) as f64 / (i as f64 + 2.0).log2())
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| g as f64 / (i as f64 + 2.0).log2())
            .sum();
        per_query.insert(qid.clone(), if idcg > 0.0 { dcg / idcg } else { 0.0 });
    }
    finish(per_query, skipped)
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricReport {
    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    for (qid, ranking) in &run.queries {
        let Some(judged) = qrels.queries.get(qid) else {
            log::warn!("query {qid} has no judgments; skipped");
            skipped.push(qid.clone());
            continue;
        };
        let relevant = judged.values().filter(|&&g| g > 0).count();
        if relevant == 0 {
            continue;
        }
        let found = ranking
            .iter()
            .take(k)
            .filter(|(doc, _)| judged.get(doc).is_some_and(|&g| g > 0))
            .count();
        per_query.insert(qid.clone(), found as f64 / relevant as f64);
    }
    finish(per_query, skipped)
}

pub fn evaluate_metric(run: &Run, qrels: &Qrels, metric: Metric) -> MetricReport {
    match metric {
        Metric::Ndcg(k) => ndcg_at_k(run, qrels, k),
        Metric::Recall(k) => recall_at_k(run, qrels, k),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, MetricReport>,
}

pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> EvalReport {
    EvalReport {
        metrics: metrics
            .iter()
            .map(|&m| (m.to_string(), evaluate_metric(run, qrels, m)))
            .collect(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metric  queries  mean` in aligned columns.
    pub fn to_text(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>7}  {:>8}\n", "metric", "queries", "mean");
        for (name, r) in &self.metrics {
            let _ = writeln!(out, "{name:<width$}  {:>7}  {:>8.4}", r.per_query.len(), r.mean);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(rows: &[(&str, &str, f64)]) -> Run {
        let mut q: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (qid, doc, s) in rows {
            q.entry(qid.to_string()).or_default().push((doc.to_string(), *s));
        }
        Run::from_unsorted(q)
    }

    fn qrels(rows: &[(&str, &str, u32)]) -> Qrels {
        let mut q: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for (qid, doc, g) in rows {
            q.entry(qid.to_string()).or_default().insert(doc.to_string(), *g);
        }
        Qrels { queries: q }
    }

    #[test]
    fn perfect_and_missing() {
        let r = run(&[("q", "d1", 3.0), ("q", "d2", 2.0)]);
        assert_eq!(ndcg_at_k(&r, &qrels(&[("q", "d1", 1)]), 10).mean, 1.0);
        assert_eq!(ndcg_at_k(&r, &qrels(&[("q", "d9", 1)]), 10).mean, 0.0);
        assert_eq!(recall_at_k(&r, &qrels(&[("q", "d1", 1), ("q", "d2", 1)]), 100).mean, 1.0);
        assert_eq!(recall_at_k(&r, &qrels(&[("q", "d9", 1)]), 100).mean, 0.0);
    }

    #[test]
    fn three_of_five_recall() {
        let r = run(&[("q", "a", 5.0), ("q", "x", 4.0), ("q", "b", 3.0), ("q", "c", 2.0)]);
        let j = qrels(&[("q", "a", 1), ("q", "b", 2), ("q", "c", 1), ("q", "d", 1), ("q", "e", 1)]);
        assert!((recall_at_k(&r, &j, 100).mean - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_relevant_asymmetry() {
        let r = run(&[("q1", "a", 1.0), ("q2", "a", 1.0)]);
        let j = qrels(&[("q1", "a", 1), ("q2", "a", 0)]);
        let n = ndcg_at_k(&r, &j, 10);
        assert_eq!(n.per_query.len(), 2);
        assert_eq!(n.mean, 0.5);
        let rc = recall_at_k(&r, &j, 10);
        assert_eq!(rc.per_query.len(), 1);
        assert_eq!(rc.mean, 1.0);
    }

    #[test]
    fn unjudged_queries_are_skipped() {
        let r = run(&[("q1", "a", 1.0), ("zz", "a", 1.0)]);
        let n = ndcg_at_k(&r, &qrels(&[("q1", "a", 1)]), 10);
        assert_eq!(n.skipped, vec!["zz"]);
        assert_eq!(n.mean, 1.0);
    }

    #[test]
    fn parses_and_resorts() {
        let text = "q1 Q0 d1 1 0.2 tag\nq1 Q0 d2 2 0.9 tag\n\nq2 Q0 d1 1 1.5 tag\nq2 Q0 d3 2 1.5 tag\n";
        let r = parse_run(text, Path::new("run")).unwrap();
        assert_eq!(
            r.queries["q1"],
            vec![("d2".to_string(), 0.9), ("d1".to_string(), 0.2)]
        );
        assert_eq!(
            r.queries["q2"],
            vec![("d1".to_string(), 1.5), ("d3".to_string(), 1.5)]
        );
        let q = parse_qrels("q1 0 d1 1\nq1 0 d2 0\nq2 0 d3 2\nq2 0 d4 1\n", Path::new("qrels")).unwrap();
        assert_eq!(q.queries.len(), 2);
        assert_eq!(q.queries["q1"]["d1"], 1);
        assert_eq!(q.queries["q1"]["d2"], 0);
        assert_eq!(q.queries["q2"]["d3"], 2);
        assert_eq!(q.queries["q2"]["d4"], 1);
        assert!(parse_run("", Path::new("r")).unwrap().queries.is_empty());
        assert!(parse_qrels("", Path::new("q")).unwrap().queries.is_empty());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let bad = parse_run("q1 Q0 d1 1 0.2 tag\nq1 Q0 d2 x\n", Path::new("run"));
        assert!(matches!(bad, Err(Error::Parse { line: 2, .. })));
        let bad = parse_run("q1 Q0 d1 1 abc tag\n", Path::new("run"));
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
        let bad = parse_qrels("q1 0 d1 1\nq1 0 d2 -1\n", Path::new("qrels"));
        assert!(matches!(bad, Err(Error::Parse { line: 2, .. })));
        let dup = parse_run("q Q0 d 1 1 t\nq Q0 d 2 0.5 t\n", Path::new("run"));
        assert!(matches!(dup, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn metric_names() {
        assert_eq!("ndcg@10".parse::<Metric>().unwrap(), Metric::Ndcg(10));
        assert_eq!("R@100".parse::<Metric>().unwrap(), Metric::Recall(100));
        assert!("ndcg@0".parse::<Metric>().is_err());
        assert!("map@10".parse::<Metric>().is_err());
        let report = evaluate(&Run::default(), &Qrels::default(), &[Metric::Ndcg(10)]);
        assert!(report.to_text().contains("ndcg@10"));
    }
}
