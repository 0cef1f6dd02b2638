//! Per-cluster budgets, temperature-softmax sampling and MMR diversification.
//!
//! For every cluster the budget `N_k` is drawn `m` times without replacement
//! from the softmax over member-to-centroid cosines, the draws are pooled,
//! and MMR picks the final `N_k` documents from the pool.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::KMeansModel;
use crate::corpus::Collection;
use crate::embed::{cosine_similarity, l2_norm, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-cluster sample sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub sizes: Vec<usize>,
    pub total: usize,
    pub cluster_sizes: Vec<usize>,
    pub collection_size: usize,
}

/// Splits a budget of `n` documents across clusters of the given sizes.
///
/// Every cluster gets one document plus its floor share of the remaining
/// `n - K`; the leftover units go to the largest clusters. Budgets that
/// exceed a cluster's size are capped and the excess flows, one unit at a
/// time, to the largest cluster that still has room.
pub fn allocate_sizes(cluster_sizes: &[usize], n: usize) -> Result<Allocation> {
    let k = cluster_sizes.len();
    if k == 0 {
        return Err(Error::InfeasibleBudget("no clusters to allocate over".into()));
    }
    if let Some(c) = cluster_sizes.iter().position(|&c| c == 0) {
        return Err(Error::InfeasibleBudget(format!("cluster {c} is empty")));
    }
    let collection_size: usize = cluster_sizes.iter().sum();
    if n < k {
        return Err(Error::InfeasibleBudget(format!(
            "N = {n} is smaller than K = {k}"
        )));
    }
    if n > collection_size {
        return Err(Error::InfeasibleBudget(format!(
            "N = {n} exceeds the {collection_size} documents available"
        )));
    }

    let spare = (n - k) as u128;
    let total = collection_size as u128;
    let mut sizes: Vec<usize> = cluster_sizes
        .iter()
        .map(|&c| 1 + ((c as u128 * spare) / total) as usize)
        .collect();
    let remainder = n - sizes.iter().sum::<usize>();

    // Largest clusters first, lower index on ties.
    let mut by_size: Vec<usize> = (0..k).collect();
    by_size.sort_by(|&a, &b| cluster_sizes[b].cmp(&cluster_sizes[a]).then(a.cmp(&b)));
    for &c in by_size.iter().take(remainder) {
        sizes[c] += 1;
    }

    let mut overflow = 0;
    for (s, &c) in sizes.iter_mut().zip(cluster_sizes) {
        if *s > c {
            overflow += *s - c;
            *s = c;
        }
    }
    for &c in &by_size {
        if overflow == 0 {
            break;
        }
        let room = cluster_sizes[c] - sizes[c];
        let moved = room.min(overflow);
        sizes[c] += moved;
        overflow -= moved;
    }
    debug_assert_eq!(sizes.iter().sum::<usize>(), n);

    Ok(Allocation {
        sizes,
        total: n,
        cluster_sizes: cluster_sizes.to_vec(),
        collection_size,
    })
}

/// Cosine between each member of cluster `k` and the mean of the members'
/// embeddings, in ascending ordinal order.
pub fn centroid_similarities<F: Scalar>(
    x: &EmbeddingMatrix<F>,
    model: &KMeansModel<F>,
    k: usize,
) -> Result<Vec<F>> {
    let members: Vec<usize> = model
        .assignments()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == k)
        .map(|(i, _)| i)
        .collect();
    member_similarities(x, &members, k)
}

fn member_similarities<F: Scalar>(x: &EmbeddingMatrix<F>, members: &[usize], k: usize) -> Result<Vec<F>> {
    if members.is_empty() {
        return Err(Error::DegenerateCluster { cluster: k });
    }
    let dim = x.dim();
    let mut mean = vec![F::zero(); dim];
    for &i in members {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m = *m + v;
        }
    }
    let count = F::of(members.len() as f64);
    mean.iter_mut().for_each(|m| *m = *m / count);
    if l2_norm(&mean) == F::zero() {
        return Err(Error::DegenerateCluster { cluster: k });
    }
    members
        .iter()
        .map(|&i| cosine_similarity(x.row(i), &mean))
        .collect()
}

/// `exp(d_i / T)` normalized to a distribution, with the max subtracted
/// first for stability.
pub fn softmax_probabilities<F: Scalar>(d: &[F], temperature: F) -> Result<Vec<F>> {
    if !(temperature > F::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if d.is_empty() {
        return Err(Error::InvalidConfig("softmax over an empty vector".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite similarity in softmax input".into()));
    }
    let max = d.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = d.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Draws `n` distinct indices one at a time, each with probability
/// proportional to its weight among the indices not yet drawn.
pub fn sample_without_replacement<F: Scalar, R: Rng + ?Sized>(
    p: &[F],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n > p.len() {
        return Err(Error::InfeasibleBudget(format!(
            "cannot draw {n} distinct items from {}",
            p.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..p.len()).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mass: f64 = remaining.iter().map(|&i| p[i].as_f64()).sum();
        let target = rng.gen::<f64>() * mass;
        let mut acc = 0.0;
        let mut slot = remaining.len() - 1;
        for (s, &i) in remaining.iter().enumerate() {
            acc += p[i].as_f64();
            if acc > target {
                slot = s;
                break;
            }
        }
        out.push(remaining.remove(slot));
    }
    Ok(out)
}

/// Greedy maximal marginal relevance.
///
/// Each step picks the pool item maximizing
/// `lambda * sim_to_anchor - (1 - lambda) * max_{s in selected} pairwise(item, s)`,
/// with the redundancy term taken as zero while nothing is selected. Ties go
/// to the smaller ordinal. `sims_to_anchor[i]` belongs to `pool[i]`.
pub fn mmr_select<F, P>(
    pool: &[usize],
    sims_to_anchor: &[F],
    pairwise: P,
    lambda: F,
    n: usize,
) -> Result<Vec<usize>>
where
    F: Scalar,
    P: Fn(usize, usize) -> F,
{
    if !(lambda >= F::zero() && lambda <= F::one()) {
        return Err(Error::InvalidConfig(format!("MMR lambda {lambda} outside [0, 1]")));
    }
    if pool.len() != sims_to_anchor.len() {
        return Err(Error::SizeMismatch(format!(
            "{} anchor similarities for a pool of {}",
            sims_to_anchor.len(),
            pool.len()
        )));
    }
    let want = n.min(pool.len());
    let diversity = F::one() - lambda;
    let mut redundancy: Vec<Option<F>> = vec![None; pool.len()];
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let mut best: Option<(usize, F)> = None;
        for slot in 0..pool.len() {
            if taken[slot] {
                continue;
            }
            let penalty = redundancy[slot].unwrap_or_else(F::zero);
            let score = lambda * sims_to_anchor[slot] - diversity * penalty;
            let better = match best {
                None => true,
                Some((b, bs)) => score > bs || (score == bs && pool[slot] < pool[b]),
            };
            if better {
                best = Some((slot, score));
            }
        }
        let (pick, _) = best.expect("want <= remaining pool");
        taken[pick] = true;
        out.push(pool[pick]);
        for slot in 0..pool.len() {
            if !taken[slot] {
                let s = pairwise(pool[slot], pool[pick]);
                redundancy[slot] = Some(match redundancy[slot] {
                    Some(r) if r >= s => r,
                    _ => s,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub rounds: usize,
    pub lambda: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            rounds: 5,
            lambda: 1.0,
            n: 1000,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    fn validate(&self, k: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("sampling rounds must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must lie in [0, 1]".into()));
        }
        if self.n < k {
            return Err(Error::InfeasibleBudget(format!(
                "N = {} is smaller than K = {k}",
                self.n
            )));
        }
        Ok(())
    }
}

/// RNG for sampling round `round` of cluster `cluster`. Streams are
/// independent of each other and of evaluation order.
pub fn round_rng(seed: u64, cluster: usize, round: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(cluster as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(round as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedEntry {
    pub ordinal: usize,
    pub cluster: usize,
    /// Cosine to the cluster's member mean.
    pub similarity: f64,
    pub probability: f64,
    pub rank_in_cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSet {
    pub clusters: Vec<Vec<SelectedEntry>>,
    pub allocation: Allocation,
}

impl SelectedSet {
    pub fn len(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = &SelectedEntry> {
        self.clusters.iter().flatten()
    }

    pub fn ordinals(&self) -> Vec<usize> {
        self.entries().map(|e| e.ordinal).collect()
    }

    pub fn records(&self, collection: &Collection) -> Result<Vec<SelectedRecord>> {
        self.entries()
            .map(|e| {
                let doc = collection.get(e.ordinal).ok_or_else(|| {
                    Error::Alignment(format!("selected ordinal {} outside collection", e.ordinal))
                })?;
                Ok(SelectedRecord {
                    doc_id: doc.id.clone(),
                    cluster: e.cluster,
                    d_i: e.similarity,
                    prob: e.probability,
                    rank_in_cluster: e.rank_in_cluster,
                })
            })
            .collect()
    }
}

/// One line of the persisted selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRecord {
    pub doc_id: String,
    pub cluster: usize,
    pub d_i: f64,
    pub prob: f64,
    pub rank_in_cluster: usize,
}

pub fn write_selected(path: &Path, records: &[SelectedRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_selected(path: &Path) -> Result<Vec<SelectedRecord>> {
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

/// Picks `cfg.n` representative, diverse documents across all clusters.
///
/// Clusters are processed in parallel on the current rayon pool; each uses
/// its own [`round_rng`] streams so the output is independent of scheduling.
pub fn select_representatives<F: Scalar>(
    x: &EmbeddingMatrix<F>,
    model: &KMeansModel<F>,
    cfg: &SamplingConfig,
) -> Result<SelectedSet> {
    if x.rows() != model.assignments().len() {
        return Err(Error::Alignment(format!(
            "{} embedding rows for a model over {} documents",
            x.rows(),
            model.assignments().len()
        )));
    }
    cfg.validate(model.k())?;
    let allocation = allocate_sizes(&model.cluster_sizes(), cfg.n)?;
    let members = model.members();
    let clusters = members
        .par_iter()
        .enumerate()
        .map(|(k, m)| select_in_cluster(x, k, m, allocation.sizes[k], cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectedSet {
        clusters,
        allocation,
    })
}

fn select_in_cluster<F: Scalar>(
    x: &EmbeddingMatrix<F>,
    k: usize,
    members: &[usize],
    budget: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<SelectedEntry>> {
    let sims = member_similarities(x, members, k)?;
    let probs = softmax_probabilities(&sims, F::of(cfg.temperature))?;

    let mut pool_slots: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for round in 0..cfg.rounds {
        let mut rng = round_rng(cfg.seed, k, round);
        for slot in sample_without_replacement(&probs, budget, &mut rng)? {
            if seen.insert(slot) {
                pool_slots.push(slot);
            }
        }
    }

    let anchor = argmax_first(&sims);
    let anchor_row = x.row(members[anchor]);
    let pool: Vec<usize> = pool_slots.iter().map(|&s| members[s]).collect();
    let to_anchor = pool
        .iter()
        .map(|&i| cosine_similarity(x.row(i), anchor_row))
        .collect::<Result<Vec<F>>>()?;
    let pairwise = |a: usize, b: usize| {
        cosine_similarity(x.row(a), x.row(b)).unwrap_or_else(|_| F::zero())
    };
    let mut chosen = mmr_select(&pool, &to_anchor, pairwise, F::of(cfg.lambda), budget)?;

    if chosen.len() < budget {
        // Highest-probability members the rounds never drew.
        let mut rest: Vec<usize> = (0..members.len()).filter(|s| !seen.contains(s)).collect();
        rest.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        chosen.extend(rest.into_iter().take(budget - chosen.len()).map(|s| members[s]));
    }

    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(rank, ordinal)| {
            let slot = members.binary_search(&ordinal).expect("chosen from members");
            SelectedEntry {
                ordinal,
                cluster: k,
                similarity: sims[slot].as_f64(),
                probability: probs[slot].as_f64(),
                rank_in_cluster: rank,
            }
        })
        .collect())
}

fn argmax_first<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
