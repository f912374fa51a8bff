//! Parameter-free heads built directly on per-frame embeddings.

use crate::data::embed::{l2_normalize, ClassPrototypes, FrameSequence};
use crate::data::synth::argmax;
use crate::error::{Error, Result};

/// Index of the middle frame, `⌊(T−1)/2⌋`.
pub fn mid_index(frames: usize) -> usize {
    frames.saturating_sub(1) / 2
}

pub fn fuse_mid_frame(seq: &FrameSequence) -> Result<Vec<f32>> {
    if seq.is_empty() {
        return Err(Error::EmptyDataset);
    }
    l2_normalize(seq.frame(mid_index(seq.len())))
}

/// Element-wise maximum over time, then L2-normalized.
pub fn fuse_max_pool(seq: &FrameSequence) -> Result<Vec<f32>> {
    if seq.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pooled = seq.frame(0).to_vec();
    for t in 1..seq.len() {
        for (m, &v) in pooled.iter_mut().zip(seq.frame(t)) {
            *m = m.max(v);
        }
    }
    l2_normalize(&pooled)
}

/// Classifies every frame by its best prototype and returns the modal
/// class. Ties go to the class with the larger summed frame score, then to
/// the lower class index.
pub fn classify_majority_vote(seq: &FrameSequence, protos: &ClassPrototypes) -> Result<usize> {
    if seq.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = protos.num_classes();
    let mut votes = vec![0usize; c];
    let mut summed = vec![0.0f64; c];
    for t in 0..seq.len() {
        let scores = protos.scores(seq.frame(t))?;
        votes[argmax(&scores)] += 1;
        summed.iter_mut().zip(&scores).for_each(|(s, x)| *s += x);
    }
    let mut best = 0;
    for k in 1..c {
        let better = votes[k] > votes[best] || (votes[k] == votes[best] && summed[k] > summed[best]);
        if better {
            best = k;
        }
    }
    Ok(best)
}
