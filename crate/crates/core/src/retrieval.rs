//! Gallery construction, cosine top-k search, Recall@k and
//! RecallAccuracy@k, and the gallery × query intervention grid.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::intervention::{intervene_random, item_rng, InterventionValues};
use crate::model::{AnyModel, BaseForward};

/// RNG stream for gallery-side corrections.
pub const GALLERY_STREAM: u64 = 0x67;
/// RNG stream for query-side corrections.
pub const QUERY_STREAM: u64 = 0x71;

/// Indexed, L2-normalized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    dim: usize,
    embeddings: Vec<f64>,
    pub intervention_fraction: f64,
}

impl Gallery {
    /// Normalizes and stores `rows`; a zero row is an error.
    pub fn from_embeddings(ids: Vec<u64>, labels: Vec<usize>, rows: Vec<Vec<f64>>, intervention_fraction: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("gallery needs at least one item".into()));
        }
        if ids.len() != rows.len() || labels.len() != rows.len() {
            return Err(Error::Validation(format!(
                "gallery has {} rows, {} ids and {} labels",
                rows.len(),
                ids.len(),
                labels.len()
            )));
        }
        let dim = rows[0].len();
        let mut embeddings = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Dimension {
                    op: "gallery",
                    left: vec![i, r.len()],
                    right: vec![dim],
                });
            }
            embeddings.extend(normalize(r).map_err(|e| Error::Validation(format!("gallery item {}: {e}", ids[i])))?);
        }
        Ok(Gallery {
            ids,
            labels,
            dim,
            embeddings,
            intervention_fraction,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&g| g == id)
    }
}

/// Unit-L2 copy of `v`; zero or non-finite norms are rejected.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = kernels::dot(v, v).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Validation(format!("cannot normalize embedding with norm {norm}")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Ranked neighbours of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: Option<u64>,
    pub ids: Vec<u64>,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub labels: Vec<usize>,
    /// Fewer than the requested `k` items were available.
    pub truncated: bool,
}

impl QueryResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cosine-distance (`1 − cos`) top-k against every gallery row, ascending,
/// ties broken by lower gallery index. `exclude_id` removes one gallery
/// item (leave-one-out).
pub fn top_k(gallery: &Gallery, query: &[f64], k: usize, exclude_id: Option<u64>) -> Result<QueryResult> {
    if k == 0 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    if query.len() != gallery.dim {
        return Err(Error::Dimension {
            op: "top_k",
            left: vec![query.len()],
            right: vec![gallery.dim],
        });
    }
    let q = normalize(query)?;
    let excluded = exclude_id.and_then(|id| gallery.position(id));
    let available = gallery.len() - excluded.is_some() as usize;
    let want = k.min(available);

    // max-heap of the best `want` candidates seen so far
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(want + 1);
    for i in 0..gallery.len() {
        if Some(i) == excluded {
            continue;
        }
        let cand = Candidate {
            dist: 1.0 - kernels::dot(&q, gallery.row(i)),
            index: i,
        };
        if heap.len() < want {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    let ranked = heap.into_sorted_vec();
    Ok(QueryResult {
        query_id: exclude_id,
        ids: ranked.iter().map(|c| gallery.ids[c.index]).collect(),
        indices: ranked.iter().map(|c| c.index).collect(),
        distances: ranked.iter().map(|c| c.dist).collect(),
        labels: ranked.iter().map(|c| gallery.labels[c.index]).collect(),
        truncated: want < k,
    })
}

fn check_results(results: &[QueryResult], true_labels: &[usize]) -> Result<usize> {
    if results.len() != true_labels.len() {
        return Err(Error::Validation(format!(
            "{} results but {} true labels",
            results.len(),
            true_labels.len()
        )));
    }
    let Some(first) = results.first() else {
        return Err(Error::Validation("no query results".into()));
    };
    let k = first.len();
    if k == 0 || results.iter().any(|r| r.len() != k) {
        return Err(Error::Validation("every query result must hold the same non-zero number of items".into()));
    }
    Ok(k)
}

/// Fraction of queries with at least one same-label item in their top-k.
pub fn recall_at_k(results: &[QueryResult], true_labels: &[usize]) -> Result<f64> {
    check_results(results, true_labels)?;
    let hits = results
        .iter()
        .zip(true_labels)
        .filter(|(r, &y)| r.labels.contains(&y))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Same-label items across all top-k lists, divided by `N·k`.
pub fn recall_accuracy_at_k(results: &[QueryResult], true_labels: &[usize]) -> Result<f64> {
    let k = check_results(results, true_labels)?;
    let correct: usize = results
        .iter()
        .zip(true_labels)
        .map(|(r, &y)| r.labels.iter().filter(|&&l| l == y).count())
        .sum();
    Ok(correct as f64 / (results.len() * k) as f64)
}

/// Model outputs for every item of a split, computed once and reused for
/// any number of intervention levels.
#[derive(Debug, Clone)]
pub struct EncodedSplit {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub truth: Vec<Vec<u8>>,
    pub base: Vec<BaseForward>,
}

impl EncodedSplit {
    pub fn new(model: &AnyModel, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Validation("split is empty".into()));
        }
        let base = data.iter().map(|e| model.base(&e.x)).collect::<Result<Vec<_>>>()?;
        Ok(EncodedSplit {
            ids: data.iter().map(|e| e.id).collect(),
            labels: data.iter().map(|e| e.y).collect(),
            truth: data.iter().map(|e: &Example| e.c.clone()).collect(),
            base,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concept vector of item `i` after correcting `⌊fraction·K⌋` concepts,
    /// drawn from the `(seed, stream, id)` RNG. `None` for models without
    /// concepts.
    pub fn corrected_concepts(
        &self,
        i: usize,
        fraction: f64,
        seed: u64,
        stream: u64,
        values: Option<&InterventionValues>,
    ) -> Result<Option<Vec<f64>>> {
        let Some(concepts) = &self.base[i].concepts else {
            return Ok(None);
        };
        if fraction == 0.0 {
            return Ok(Some(concepts.activations.clone()));
        }
        let values = values.ok_or_else(|| Error::State("intervention requires intervention values".into()))?;
        let mut rng = item_rng(seed, stream, self.ids[i]);
        intervene_random(&concepts.activations, &self.truth[i], fraction, &mut rng, values).map(Some)
    }

    /// Retrieval embedding of item `i` at a correction level.
    pub fn embedding(
        &self,
        model: &AnyModel,
        i: usize,
        fraction: f64,
        seed: u64,
        stream: u64,
        values: Option<&InterventionValues>,
    ) -> Result<Vec<f64>> {
        let c = self.corrected_concepts(i, fraction, seed, stream, values)?;
        model.embedding(&self.base[i], c.as_deref())
    }
}

/// Builds a gallery where each item's concepts are corrected at
/// `fraction` using its ground truth; `fraction = 0` uses raw predictions.
pub fn build_gallery(
    model: &AnyModel,
    data: &Dataset,
    values: Option<&InterventionValues>,
    fraction: f64,
    seed: u64,
) -> Result<Gallery> {
    let enc = EncodedSplit::new(model, data)?;
    gallery_from_encoded(model, &enc, values, fraction, seed)
}

pub fn gallery_from_encoded(
    model: &AnyModel,
    enc: &EncodedSplit,
    values: Option<&InterventionValues>,
    fraction: f64,
    seed: u64,
) -> Result<Gallery> {
    let rows = (0..enc.len())
        .map(|i| enc.embedding(model, i, fraction, seed, GALLERY_STREAM, values))
        .collect::<Result<Vec<_>>>()?;
    Gallery::from_embeddings(enc.ids.clone(), enc.labels.clone(), rows, fraction)
}

/// Leave-one-out queries of every split item against `gallery`, with
/// query-side correction at `fraction`.
pub fn query_all(
    model: &AnyModel,
    enc: &EncodedSplit,
    gallery: &Gallery,
    values: Option<&InterventionValues>,
    fraction: f64,
    seed: u64,
    k: usize,
) -> Result<Vec<QueryResult>> {
    (0..enc.len())
        .map(|i| {
            let q = enc.embedding(model, i, fraction, seed, QUERY_STREAM, values)?;
            top_k(gallery, &q, k, Some(enc.ids[i]))
        })
        .collect()
}

/// Recall@k and RecallAccuracy@k for one gallery/query correction pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub k: usize,
    pub recall: f64,
    pub recall_accuracy: f64,
}

/// Scores for several `k` from a single ranking at `max(k_list)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_retrieval(
    model: &AnyModel,
    enc: &EncodedSplit,
    values: Option<&InterventionValues>,
    gallery_fraction: f64,
    query_fraction: f64,
    seed: u64,
    k_list: &[usize],
) -> Result<Vec<RetrievalScores>> {
    let kmax = *k_list.iter().max().ok_or_else(|| Error::Validation("empty k list".into()))?;
    let gallery = gallery_from_encoded(model, enc, values, gallery_fraction, seed)?;
    let full = query_all(model, enc, &gallery, values, query_fraction, seed, kmax)?;
    k_list
        .iter()
        .map(|&k| {
            let cut: Vec<QueryResult> = full.iter().map(|r| truncate(r, k)).collect();
            Ok(RetrievalScores {
                k,
                recall: recall_at_k(&cut, &enc.labels)?,
                recall_accuracy: recall_accuracy_at_k(&cut, &enc.labels)?,
            })
        })
        .collect()
}

fn truncate(r: &QueryResult, k: usize) -> QueryResult {
    let n = k.min(r.len());
    QueryResult {
        query_id: r.query_id,
        ids: r.ids[..n].to_vec(),
        indices: r.indices[..n].to_vec(),
        distances: r.distances[..n].to_vec(),
        labels: r.labels[..n].to_vec(),
        truncated: r.truncated || n < k,
    }
}

/// Mean and standard deviation of RecallAccuracy@k over seeds, indexed
/// `[gallery][query]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub gallery_fractions: Vec<f64>,
    pub query_fractions: Vec<f64>,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

fn check_fractions(name: &str, f: &[f64]) -> Result<()> {
    if f.is_empty() {
        return Err(Error::Validation(format!("{name} fractions must not be empty")));
    }
    if let Some(bad) = f.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("{name} fraction {bad} outside [0, 1]")));
    }
    Ok(())
}

/// RecallAccuracy@k for every (gallery fraction, query fraction) pair,
/// averaged over `seeds`. Cells are evaluated in parallel; per-item RNG
/// streams make the result independent of evaluation order.
pub fn intervention_grid(
    model: &AnyModel,
    enc: &EncodedSplit,
    values: Option<&InterventionValues>,
    gallery_fractions: &[f64],
    query_fractions: &[f64],
    k: usize,
    seeds: &[u64],
) -> Result<GridResult> {
    check_fractions("gallery", gallery_fractions)?;
    check_fractions("query", query_fractions)?;
    if seeds.is_empty() {
        return Err(Error::Validation("at least one seed is required".into()));
    }
    let cells: Vec<(usize, usize, usize)> = (0..gallery_fractions.len())
        .flat_map(|g| (0..query_fractions.len()).flat_map(move |q| (0..seeds.len()).map(move |s| (g, q, s))))
        .collect();
    let galleries: Vec<Vec<Gallery>> = gallery_fractions
        .par_iter()
        .map(|&gf| {
            seeds
                .iter()
                .map(|&s| gallery_from_encoded(model, enc, values, gf, s))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(g, q, s)| {
            let res = query_all(model, enc, &galleries[g][s], values, query_fractions[q], seeds[s], k)?;
            recall_accuracy_at_k(&res, &enc.labels)
        })
        .collect::<Result<_>>()?;
    let ns = seeds.len();
    let mut mean = vec![vec![0.0; query_fractions.len()]; gallery_fractions.len()];
    let mut std = mean.clone();
    for g in 0..gallery_fractions.len() {
        for q in 0..query_fractions.len() {
            let base = (g * query_fractions.len() + q) * ns;
            let vals = &scores[base..base + ns];
            let m = vals.iter().sum::<f64>() / ns as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ns as f64;
            mean[g][q] = m;
            std[g][q] = var.sqrt();
        }
    }
    Ok(GridResult {
        gallery_fractions: gallery_fractions.to_vec(),
        query_fractions: query_fractions.to_vec(),
        k,
        seeds: seeds.to_vec(),
        mean,
        std,
    })
}

impl GridResult {
    /// Wide matrix: one row per gallery fraction, one column per query fraction.
    pub fn to_wide_csv(&self) -> String {
        let mut s = String::from("gallery_fraction");
        for q in &self.query_fractions {
            let _ = write!(s, ",q{q}");
        }
        s.push('\n');
        for (g, row) in self.gallery_fractions.iter().zip(&self.mean) {
            let _ = write!(s, "{g}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Long format: one row per cell.
    pub fn to_long_csv(&self) -> String {
        let mut s = String::from("gallery_fraction,query_fraction,k,mean_recall_accuracy,std_recall_accuracy\n");
        for (gi, g) in self.gallery_fractions.iter().enumerate() {
            for (qi, q) in self.query_fractions.iter().enumerate() {
                let _ = writeln!(s, "{g},{q},{},{},{}", self.k, self.mean[gi][qi], self.std[gi][qi]);
            }
        }
        s
    }
}

/// CSV with header `id,label,e0..e{d-1}`, rows in gallery order.
pub fn embeddings_csv(gallery: &Gallery) -> String {
    let mut s = String::from("id,label");
    for j in 0..gallery.dim {
        let _ = write!(s, ",e{j}");
    }
    s.push('\n');
    for i in 0..gallery.len() {
        let _ = write!(s, "{},{}", gallery.ids[i], gallery.labels[i]);
        for v in gallery.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn export_embeddings(gallery: &Gallery, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_csv(gallery)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(rows: Vec<Vec<f64>>) -> Gallery {
        let n = rows.len();
        Gallery::from_embeddings((0..n as u64).collect(), (0..n).collect(), rows, 0.0).unwrap()
    }

    #[test]
    fn self_match_ranks_first() {
        let g = gallery(vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.2, 0.1]]);
        let r = top_k(&g, &[-3.0, 0.5], 2, None).unwrap();
        assert_eq!(r.indices[0], 1);
        assert!(r.distances[0].abs() < 1e-15);
    }

    #[test]
    fn orthogonal_query_ties_in_index_order() {
        let g = gallery(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]);
        let r = top_k(&g, &[0.0, 0.0, 2.0], 3, None).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
        assert!(r.distances.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn leave_one_out_and_truncation() {
        let g = gallery(vec![vec![1.0, 0.0], vec![0.9, 0.1]]);
        let r = top_k(&g, &[1.0, 0.0], 5, Some(0)).unwrap();
        assert_eq!(r.ids, vec![1]);
        assert!(r.truncated);
        assert!(top_k(&g, &[1.0, 0.0], 0, None).is_err());
        assert!(top_k(&g, &[0.0, 0.0], 1, None).is_err());
    }

    #[test]
    fn zero_embedding_rejected_at_build() {
        assert!(Gallery::from_embeddings(vec![0], vec![0], vec![vec![0.0, 0.0]], 0.0).is_err());
    }

    fn result(labels: Vec<usize>) -> QueryResult {
        QueryResult {
            query_id: None,
            ids: vec![0; labels.len()],
            indices: vec![0; labels.len()],
            distances: vec![0.0; labels.len()],
            labels,
            truncated: false,
        }
    }

    #[test]
    fn metrics_hand_cases() {
        let res = vec![result(vec![1, 3]), result(vec![3, 4])];
        assert_eq!(recall_at_k(&res, &[1, 2]).unwrap(), 0.5);
        assert_eq!(recall_accuracy_at_k(&res, &[1, 2]).unwrap(), 0.25);
        let res = vec![result(vec![1, 1]), result(vec![2, 2])];
        assert_eq!(recall_at_k(&res, &[1, 2]).unwrap(), 1.0);
        assert_eq!(recall_accuracy_at_k(&res, &[1, 2]).unwrap(), 1.0);
        assert!(recall_at_k(&res, &[1]).is_err());
        assert!(recall_at_k(&[result(vec![1]), result(vec![1, 2])], &[1, 1]).is_err());
    }

    #[test]
    fn grid_rejects_empty_fractions() {
        let g = GridResult {
            gallery_fractions: vec![0.0],
            query_fractions: vec![0.0, 1.0],
            k: 10,
            seeds: vec![1],
            mean: vec![vec![0.5, 0.75]],
            std: vec![vec![0.0, 0.0]],
        };
        assert_eq!(g.to_long_csv().lines().count(), 3);
        assert_eq!(g.to_wide_csv().lines().count(), 2);
        assert!(check_fractions("gallery", &[]).is_err());
        assert!(check_fractions("gallery", &[1.5]).is_err());
    }
}
