//! Retrieval metrics, a 2-D PCA projection for plotting, and the
//! frame-clustering ratio.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::embed::{l2_normalize, FrameSequence};
use crate::error::{Error, Result};
use crate::retrieval::RankedResult;
use crate::tensor::{Real, Tensor};

pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITERS: usize = 10_000;
const VARIANCE_FLOOR: f64 = 1e-12;

/// Fraction of returned items whose id is in `relevant`. `k` is the
/// result length.
pub fn precision_at_k<S: AsRef<str>>(result: &RankedResult, relevant: &[S]) -> Result<f64> {
    if result.items.is_empty() {
        return Err(Error::EmptyResult);
    }
    let set: HashSet<&str> = relevant.iter().map(|s| s.as_ref()).collect();
    let hits = result.items.iter().filter(|i| set.contains(i.video_id.as_str())).count();
    Ok(hits as f64 / result.items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub label: Option<String>,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
    /// Unit principal directions, one per component.
    pub components: [Vec<f64>; 2],
}

impl Projection2D {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label,x,y\n");
        for p in &self.points {
            let label = p.label.as_deref().unwrap_or("");
            let _ = writeln!(out, "{},{},{},{}", p.id, label, p.x, p.y);
        }
        out
    }
}

fn sym_matvec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    m.par_chunks(d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > VARIANCE_FLOOR).then(|| v.iter().map(|x| x / n).collect())
}

/// Dominant eigenpair of a PSD matrix by power iteration, starting from the
/// column with the largest diagonal entry. Returns `None` when the matrix
/// is numerically zero.
fn dominant_eigenpair(m: &[f64], d: usize, scale: f64) -> Option<(f64, Vec<f64>)> {
    let start = (0..d).max_by(|&a, &b| m[a * d + a].total_cmp(&m[b * d + b]).then(b.cmp(&a)))?;
    if m[start * d + start] <= VARIANCE_FLOOR * scale {
        return None;
    }
    let column: Vec<f64> = (0..d).map(|r| m[r * d + start]).collect();
    let mut v = unit(&column)?;
    for _ in 0..POWER_MAX_ITERS {
        let next = unit(&sym_matvec(m, d, &v))?;
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let mv = sym_matvec(m, d, &v);
    let lambda = v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    Some((lambda, v))
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// A unit vector orthogonal to `v`, from the basis axis `v` loads least on.
fn orthogonal_axis(v: &[f64]) -> Vec<f64> {
    let mut j = 0;
    for i in 1..v.len() {
        if v[i].abs() < v[j].abs() {
            j = i;
        }
    }
    let mut e: Vec<f64> = v.iter().map(|&x| -x * v[j]).collect();
    e[j] += 1.0;
    unit(&e).expect("d >= 2 leaves an orthogonal axis")
}

/// Projects the rows of an `N×D` matrix onto its top two principal
/// components (covariance eigenvectors found by power iteration with
/// deflation).
pub fn project_2d<R: Real>(matrix: &Tensor<R>, ids: &[String], labels: &[Option<String>]) -> Result<Projection2D> {
    let (n, d) = match matrix.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::ShapeMismatch(format!("expected an N×D matrix, got {s:?}"))),
    };
    if ids.len() != n || labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} rows, {} ids, {} labels", ids.len(), labels.len())));
    }
    if n < 3 {
        return Err(Error::InsufficientData(format!("projection needs at least 3 points, got {n}")));
    }
    if d < 2 {
        return Err(Error::InsufficientData("projection needs at least 2 dimensions".into()));
    }
    let data: Vec<f64> = matrix.data().iter().map(|v| v.as_f64()).collect();
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = data.chunks(d).flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m)).collect();

    // Population covariance, computed row-block parallel.
    let mut cov = vec![0.0; d * d];
    cov.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        for row in centered.chunks(d) {
            let xi = row[i];
            if xi != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, xj)| *o += xi * xj);
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
    });
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace < VARIANCE_FLOOR {
        return Err(Error::DegenerateData(format!("total variance {trace:e} is below {VARIANCE_FLOOR:e}")));
    }

    let (l1, mut v1) = dominant_eigenpair(&cov, d, trace)
        .ok_or_else(|| Error::DegenerateData("no dominant direction".into()))?;
    fix_sign(&mut v1);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, mut v2) = match dominant_eigenpair(&cov, d, trace) {
        Some((l, v)) => {
            // Re-orthogonalize against the first component.
            let dot: f64 = v.iter().zip(&v1).map(|(a, b)| a * b).sum();
            let v: Vec<f64> = v.iter().zip(&v1).map(|(a, b)| a - dot * b).collect();
            match unit(&v) {
                Some(v) => (l, v),
                None => (0.0, orthogonal_axis(&v1)),
            }
        }
        None => (0.0, orthogonal_axis(&v1)),
    };
    fix_sign(&mut v2);

    let points = centered
        .chunks(d)
        .zip(ids.iter().zip(labels))
        .map(|(row, (id, label))| ProjectedPoint {
            id: id.clone(),
            label: label.clone(),
            x: row.iter().zip(&v1).map(|(a, b)| a * b).sum(),
            y: row.iter().zip(&v2).map(|(a, b)| a * b).sum(),
        })
        .collect();
    let e1 = (l1 / trace).clamp(0.0, 1.0);
    let e2 = (l2 / trace).clamp(0.0, e1);
    Ok(Projection2D { points, explained: [e1, e2], components: [v1, v2] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSeparation {
    /// Mean cosine distance over frame pairs drawn from the same video.
    pub intra_video: f64,
    /// Mean cosine distance over frame pairs drawn from different classes.
    pub inter_class: f64,
    pub ratio: f64,
    pub intra_pairs: u64,
    pub inter_pairs: u64,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Ratio of mean intra-video to mean inter-class cosine distance over all
/// frame pairs. Below 1 means frames of a video sit closer to each other
/// than to other classes.
///
/// Pair sums use `Σ_{i<j} xᵢ·xⱼ = (‖Σx‖² − Σ‖x‖²) / 2` over unit frames, so
/// the cost is linear in the number of frames.
pub fn cluster_separation(seqs: &[FrameSequence]) -> Result<ClusterSeparation> {
    if seqs.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 videos, got {}", seqs.len())));
    }
    let d = seqs[0].dim();
    // Per video: (label, frame sum, frame count).
    let per_video: Vec<(usize, Vec<f64>, usize)> = seqs
        .par_iter()
        .map(|s| {
            let label = s
                .label
                .ok_or_else(|| Error::InsufficientData(format!("video {} has no label", s.video_id)))?;
            if s.dim() != d {
                return Err(Error::DimMismatch { expected: d, actual: s.dim() });
            }
            let mut sum = vec![0.0; d];
            for t in 0..s.len() {
                let f64s: Vec<f64> = s.frame(t).iter().map(|&v| v as f64).collect();
                let u = l2_normalize(&f64s)?;
                sum.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
            }
            Ok((label, sum, s.len()))
        })
        .collect::<Result<_>>()?;

    let mut intra_cos = 0.0;
    let mut intra_pairs = 0u64;
    let mut classes: BTreeMap<usize, (Vec<f64>, u64)> = BTreeMap::new();
    for (label, sum, t) in &per_video {
        let t = *t as u64;
        intra_cos += (norm_sq(sum) - t as f64) / 2.0;
        intra_pairs += t * t.saturating_sub(1) / 2;
        let entry = classes.entry(*label).or_insert_with(|| (vec![0.0; d], 0));
        entry.0.iter_mut().zip(sum).for_each(|(a, b)| *a += b);
        entry.1 += t;
    }
    if intra_pairs == 0 {
        return Err(Error::InsufficientData("every video has a single frame; no intra-video pairs".into()));
    }
    if classes.len() < 2 {
        return Err(Error::InsufficientData("need videos from at least 2 classes".into()));
    }

    let mut total = vec![0.0; d];
    let mut total_count = 0u64;
    let mut same_class_sq = 0.0;
    let mut same_class_pairs = 0u64;
    for (sum, count) in classes.values() {
        total.iter_mut().zip(sum).for_each(|(a, b)| *a += b);
        total_count += count;
        same_class_sq += norm_sq(sum);
        same_class_pairs += count * count;
    }
    let inter_cos = (norm_sq(&total) - same_class_sq) / 2.0;
    let inter_pairs = (total_count * total_count - same_class_pairs) / 2;

    let intra = (1.0 - intra_cos / intra_pairs as f64).max(0.0);
    let inter = (1.0 - inter_cos / inter_pairs as f64).max(0.0);
    if inter < VARIANCE_FLOOR {
        return Err(Error::DegenerateData("frames of different classes are indistinguishable".into()));
    }
    Ok(ClusterSeparation {
        intra_video: intra,
        inter_class: inter,
        ratio: intra / inter,
        intra_pairs,
        inter_pairs,
    })
}
