//! Encode-once/query-many video retrieval by dot product over unit-norm
//! embeddings (equal to cosine similarity).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::embed::{l2_normalize, FrameSequence, UNIT_NORM_TOL};
use crate::data::vemb;
use crate::error::{Error, Result};
use crate::heads::FusionHead;
use crate::tensor::Tensor;

/// Number of results returned when the caller does not ask for a count.
pub const DEFAULT_K: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub video_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub items: Vec<RankedItem>,
    /// The normalized query actually scored.
    pub query: Vec<f32>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.video_id.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    ids: Vec<String>,
    head: String,
    fingerprint: String,
    dim: usize,
}

/// Immutable `N×D` store of unit-norm video embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    matrix: Tensor<f32>,
    head: String,
    fingerprint: String,
}

fn normalized_query(q: &[f32], dim: usize) -> Result<Vec<f64>> {
    if q.len() != dim {
        return Err(Error::DimMismatch { expected: dim, actual: q.len() });
    }
    let q64: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    l2_normalize(&q64)
}

fn score_row(row: &[f32], q: &[f64]) -> f64 {
    row.iter().zip(q).map(|(&a, &b)| a as f64 * b).sum()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::ConfigInvalid("k must be at least 1".into()));
    }
    Ok(())
}

/// Exhaustive reference ranking: score every row, sort by descending
/// score with ascending id on ties, keep the first `k`.
pub fn brute_force_topk(matrix: &Tensor<f32>, ids: &[String], query: &[f32], k: usize) -> Result<RankedResult> {
    check_k(k)?;
    let (n, d) = matrix.as_matrix_dims()?;
    if ids.len() != n {
        return Err(Error::ShapeMismatch(format!("{} ids for {n} rows", ids.len())));
    }
    let q = normalized_query(query, d)?;
    let mut all: Vec<RankedItem> = (0..n)
        .map(|i| RankedItem { video_id: ids[i].clone(), score: score_row(matrix.row(i), &q) })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.video_id.cmp(&b.video_id)));
    all.truncate(k);
    Ok(RankedResult { items: all, query: q.iter().map(|&v| v as f32).collect() })
}

struct Candidate<'a> {
    score: f64,
    id: &'a str,
}

// Heap order: the greatest element is the weakest kept candidate.
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

impl RetrievalIndex {
    pub fn from_parts(ids: Vec<String>, matrix: Tensor<f32>, head: String, fingerprint: String) -> Result<Self> {
        let (n, _) = match matrix.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::ShapeMismatch(format!("index matrix must be N×D, got {s:?}"))),
        };
        if ids.len() != n {
            return Err(Error::ShapeMismatch(format!("{} ids for {n} rows", ids.len())));
        }
        let unique: HashSet<&String> = ids.iter().collect();
        if unique.len() != n {
            return Err(Error::Malformed("index ids must be unique".into()));
        }
        for i in 0..n {
            let norm = matrix.row(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Malformed(format!("row {i} ({}) has norm {norm}", ids[i])));
            }
        }
        Ok(Self { ids, matrix, head, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn head(&self) -> &str {
        &self.head
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Top `k` rows by dot product with the normalized query, using a
    /// bounded heap. Ties rank by ascending video id.
    pub fn query(&self, query: &[f32], k: usize) -> Result<RankedResult> {
        check_k(k)?;
        let q = normalized_query(query, self.dim())?;
        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for (i, id) in self.ids.iter().enumerate() {
            let cand = Candidate { score: score_row(self.matrix.row(i), &q), id };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let items = heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| RankedItem { video_id: c.id.to_string(), score: c.score })
            .collect();
        Ok(RankedResult { items, query: q.iter().map(|&v| v as f32).collect() })
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the matrix to `path` and ids plus head fingerprint to a
    /// `.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        vemb::write_embeddings(path, &self.matrix)?;
        let side = Sidecar {
            ids: self.ids.clone(),
            head: self.head.clone(),
            fingerprint: self.fingerprint.clone(),
            dim: self.dim(),
        };
        vemb::write_atomic(&Self::sidecar_path(path), &serde_json::to_vec_pretty(&side)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let matrix = vemb::read_embeddings(path)?.into_f32();
        let side: Sidecar = serde_json::from_slice(&std::fs::read(Self::sidecar_path(path))?)?;
        if matrix.rank() != 2 || matrix.shape()[1] != side.dim {
            return Err(Error::Malformed(format!(
                "index matrix {:?} does not match sidecar dim {}",
                matrix.shape(),
                side.dim
            )));
        }
        Self::from_parts(side.ids, matrix, side.head, side.fingerprint)
    }
}

/// Embeds every video once. Row `i` equals `head.embed(&seqs[i])`.
pub fn build_index(seqs: &[FrameSequence], head: &FusionHead) -> Result<RetrievalIndex> {
    if !head.kind().emits_embedding() {
        return Err(Error::HeadNotEmbedding(head.kind().name().into()));
    }
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows: Vec<Vec<f32>> = seqs.par_iter().map(|s| Ok(head.embed(s)?.vector)).collect::<Result<_>>()?;
    let d = rows[0].len();
    let matrix = Tensor::matrix(rows.len(), d, rows.concat())?;
    let ids = seqs.iter().map(|s| s.video_id.clone()).collect();
    RetrievalIndex::from_parts(ids, matrix, head.kind().name().into(), head.fingerprint()?)
}
