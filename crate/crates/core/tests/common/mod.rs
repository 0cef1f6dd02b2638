//! Independent reference implementations and fixture generators shared by
//! the integration tests. Nothing here calls into the code under test except
//! for plain data types.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use dashu_float::round::mode::HalfEven;
use dashu_float::FBig;
use dqg_core::corpus::{Collection, Document};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Big = FBig<HalfEven, 2>;

pub const BIG_PRECISION: usize = 300;

pub fn big(v: f64) -> Big {
    Big::try_from(v).expect("finite").with_precision(BIG_PRECISION).value()
}

pub fn approx(b: &Big) -> f64 {
    b.to_f64().value()
}

/// `exp(d_i / T) / sum_j exp(d_j / T)` in 300-bit arithmetic.
pub fn softmax_oracle(d: &[f64], t: f64) -> Vec<f64> {
    let t = big(t);
    let exps: Vec<Big> = d.iter().map(|&v| (big(v) / &t).exp()).collect();
    let sum = exps.iter().fold(big(0.0), |acc, e| acc + e);
    exps.iter().map(|e| approx(&(e / &sum))).collect()
}

pub fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = big(0.0);
    let mut uu = big(0.0);
    let mut vv = big(0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (big(a), big(b));
        uv += &a * &b;
        uu += &a * &a;
        vv += &b * &b;
    }
    approx(&(uv / (uu * vv).sqrt()))
}

/// The stratified budget formulas written out literally.
pub fn allocation_transcription(c: &[usize], n: usize) -> Vec<usize> {
    let big_k = c.len();
    let big_c: usize = c.iter().sum();
    let n0: Vec<usize> = c.iter().map(|&ck| 1 + (ck * (n - big_k)) / big_c).collect();
    let p = n - n0.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..big_k).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(c[k]));
    let top: HashSet<usize> = order.into_iter().take(p).collect();
    (0..big_k)
        .map(|k| if top.contains(&k) { n0[k] + 1 } else { n0[k] })
        .collect()
}

/// Greedy MMR recomputing every score from scratch each step.
pub fn mmr_oracle(
    pool: &[usize],
    sim1: &[f64],
    sim2: &dyn Fn(usize, usize) -> f64,
    lambda: f64,
    n: usize,
) -> Vec<usize> {
    let mut selected: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    while selected.len() < n.min(pool.len()) {
        let mut best: Option<(usize, f64)> = None;
        for &r in &remaining {
            let redundancy = selected
                .iter()
                .map(|&s| sim2(pool[r], pool[s]))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
                .unwrap_or(0.0);
            let score = lambda * sim1[r] - (1.0 - lambda) * redundancy;
            let take = match best {
                None => true,
                Some((b, bs)) => score > bs || (score == bs && pool[r] < pool[b]),
            };
            if take {
                best = Some((r, score));
            }
        }
        let (r, _) = best.unwrap();
        remaining.retain(|&x| x != r);
        selected.push(r);
    }
    selected.into_iter().map(|s| pool[s]).collect()
}

/// Scores every document by scanning raw token lists.
pub fn bm25_oracle(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    docs.iter()
        .map(|doc| {
            let dl = doc.len() as f64;
            query
                .iter()
                .map(|t| {
                    let tf = doc.iter().filter(|w| *w == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
                })
                .sum()
        })
        .collect()
}

/// Positive scores, best first, ties by ordinal, cut at `x`.
pub fn rank_oracle(scores: &[f64], x: usize) -> Vec<(usize, f64)> {
    let mut hits: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, s)| s > 0.0)
        .collect();
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    hits.truncate(x);
    hits
}

/// Walks up from rank `x` collecting non-positive hits.
pub fn mining_oracle(ranked: &[usize], positive: usize, x: usize, num_neg: usize) -> (Vec<usize>, bool) {
    let window = &ranked[..ranked.len().min(x)];
    let mut picked = Vec::new();
    for &d in window.iter().rev() {
        if picked.len() == num_neg {
            break;
        }
        if d != positive {
            picked.push(d);
        }
    }
    picked.reverse();
    let shortfall = picked.len() < num_neg;
    (picked, shortfall)
}

/// trec-style evaluation straight from rows. Returns per-query values and
/// the means for nDCG@k and recall@k.
pub struct RefEval {
    pub ndcg: BTreeMap<String, f64>,
    pub recall: BTreeMap<String, f64>,
}

impl RefEval {
    pub fn mean_ndcg(&self) -> f64 {
        mean(self.ndcg.values())
    }

    pub fn mean_recall(&self) -> f64 {
        mean(self.recall.values())
    }
}

fn mean<'a>(v: impl Iterator<Item = &'a f64>) -> f64 {
    let v: Vec<f64> = v.copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn reference_eval(
    run_rows: &[(String, String, f64)],
    qrel_rows: &[(String, String, u32)],
    ndcg_k: usize,
    recall_k: usize,
) -> RefEval {
    let mut judged: HashMap<&str, HashMap<&str, u32>> = HashMap::new();
    for (q, d, g) in qrel_rows {
        judged.entry(q).or_default().insert(d, *g);
    }
    let mut ranked: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for (q, d, s) in run_rows {
        ranked.entry(q).or_default().push((d, *s));
    }
    let mut out = RefEval {
        ndcg: BTreeMap::new(),
        recall: BTreeMap::new(),
    };
    for (q, mut docs) in ranked {
        let Some(j) = judged.get(q) else { continue };
        docs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
        let gain = |d: &str| *j.get(d).unwrap_or(&0) as f64;
        let discount = |rank: usize| std::f64::consts::LN_2 / ((rank + 1) as f64).ln();
        let dcg: f64 = (1..=ndcg_k.min(docs.len())).map(|r| gain(docs[r - 1].0) * discount(r)).sum();
        let mut grades: Vec<u32> = j.values().copied().collect();
        grades.sort();
        grades.reverse();
        let idcg: f64 = (1..=ndcg_k.min(grades.len())).map(|r| grades[r - 1] as f64 * discount(r)).sum();
        out.ndcg.insert(q.to_owned(), if idcg == 0.0 { 0.0 } else { dcg / idcg });
        let relevant: HashSet<&str> = j.iter().filter(|(_, &g)| g > 0).map(|(d, _)| *d).collect();
        if !relevant.is_empty() {
            let hit = docs.iter().take(recall_k).filter(|(d, _)| relevant.contains(d)).count();
            out.recall.insert(q.to_owned(), hit as f64 / relevant.len() as f64);
        }
    }
    out
}

/// Three word families; documents draw mostly from one of them.
const FAMILIES: [&[&str]; 3] = [
    &["protein", "cell", "gene", "enzyme", "tissue", "membrane", "receptor", "mutation"],
    &["market", "stock", "bond", "yield", "equity", "price", "dividend", "inflation"],
    &["orbit", "planet", "star", "galaxy", "comet", "telescope", "nebula", "asteroid"],
];
const FILLER: [&str; 6] = ["the", "of", "and", "a", "in", "with"];

/// `n` documents in `topics` latent topics. Each topic has its own
/// vocabulary of synthetic words so texts are long enough to survive the
/// length filter and cluster cleanly.
pub fn synthetic_corpus(n: usize, topics: usize, seed: u64) -> Collection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<Vec<String>> = (0..topics)
        .map(|t| {
            let family = FAMILIES[t % FAMILIES.len()];
            (0..12)
                .map(|w| format!("{}{}x{}", family[w % family.len()], t, w))
                .collect()
        })
        .collect();
    let docs = (0..n)
        .map(|i| {
            let t = rng.gen_range(0..topics);
            let len = rng.gen_range(45..70);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        FILLER.choose(&mut rng).unwrap()
                    } else if rng.gen_bool(0.1) {
                        let other = rng.gen_range(0..topics);
                        vocab[other].choose(&mut rng).unwrap().as_str()
                    } else {
                        vocab[t].choose(&mut rng).unwrap().as_str()
                    }
                })
                .collect();
            Document::new(format!("doc{i:05}"), format!("topic {t} note {i}"), words.join(" "))
        })
        .collect();
    Collection::from_docs(docs).unwrap()
}

/// Points around three orthogonal directions in 3-D, `per` each.
pub fn three_blobs(per: usize, noise: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for axis in 0..3 {
        for _ in 0..per {
            let mut v: Vec<f64> = (0..3).map(|_| rng.gen_range(-noise..noise)).collect();
            v[axis] += 1.0;
            rows.push(v);
        }
    }
    rows
}

pub fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
}
