use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Norms below this cannot be normalized.
pub const NORM_FLOOR: f64 = 1e-12;

/// Returns `v / ‖v‖₂`. The norm is accumulated in `f64`.
pub fn l2_normalize<R: Real>(v: &[R]) -> Result<Vec<R>> {
    let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if !(norm >= NORM_FLOOR) {
        return Err(Error::NormUnderflow(norm));
    }
    Ok(v.iter().map(|x| R::from_f64_lossy(x.as_f64() / norm)).collect())
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Per-frame visual embeddings of one video, `T×D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub video_id: String,
    pub frames: Tensor<f32>,
    pub label: Option<usize>,
}

impl FrameSequence {
    pub fn new(video_id: impl Into<String>, frames: Tensor<f32>, label: Option<usize>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "frame sequence must be T×D, got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { video_id: video_id.into(), frames, label })
    }

    /// Builds a sequence from rows and L2-normalizes each one.
    pub fn from_rows(video_id: impl Into<String>, rows: &[Vec<f32>], label: Option<usize>) -> Result<Self> {
        Self::new(video_id, Tensor::from_rows(rows)?, label)?.normalized()
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }

    /// Returns a copy with every frame scaled to unit norm.
    pub fn normalized(&self) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.frames.len());
        for t in 0..self.len() {
            data.extend(l2_normalize(self.frame(t))?);
        }
        Ok(Self {
            video_id: self.video_id.clone(),
            frames: Tensor::matrix(self.len(), d, data)?,
            label: self.label,
        })
    }

    /// Resamples to exactly `target` frames with [`super::sample_frames`].
    pub fn resampled(&self, target: usize) -> Result<Self> {
        if target == 0 {
            return Err(Error::ConfigInvalid("target frame count must be positive".into()));
        }
        let idx = super::sample_frames(self.len(), target);
        let mut data = Vec::with_capacity(target * self.dim());
        for &i in &idx {
            data.extend_from_slice(self.frame(i));
        }
        Ok(Self {
            video_id: self.video_id.clone(),
            frames: Tensor::matrix(target, self.dim(), data)?,
            label: self.label,
        })
    }
}

/// Frozen text-side class embeddings, one unit-norm row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    names: Vec<String>,
    vectors: Tensor<f32>,
}

pub const UNIT_NORM_TOL: f64 = 1e-5;

impl ClassPrototypes {
    /// Validates the matrix; rows are required to be unit norm already.
    pub fn new(names: Vec<String>, vectors: Tensor<f32>) -> Result<Self> {
        let (c, _) = match vectors.shape() {
            [c, d] => (*c, *d),
            s => return Err(Error::ShapeMismatch(format!("prototypes must be C×D, got {s:?}"))),
        };
        if c < 2 {
            return Err(Error::ConfigInvalid(format!("need at least 2 classes, got {c}")));
        }
        if names.len() != c {
            return Err(Error::ConfigInvalid(format!("{} names for {c} prototype rows", names.len())));
        }
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::ConfigInvalid("class names must be unique".into()));
        }
        for i in 0..c {
            let n = dot_f64(vectors.row(i), vectors.row(i)).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::ConfigInvalid(format!("prototype {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { names, vectors })
    }

    /// Normalizes each row before validating.
    pub fn from_raw(names: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let normed = rows.iter().map(|r| l2_normalize(r)).collect::<Result<Vec<_>>>()?;
        Self::new(names, Tensor::from_rows(&normed)?)
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn vector(&self, class: usize) -> &[f32] {
        self.vectors.row(class)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `D×C` transpose, the right operand of the logit product.
    pub fn transposed(&self) -> Tensor<f32> {
        self.vectors.transposed().expect("prototypes are a matrix")
    }

    /// Dot product of `v` with every prototype, accumulated in `f64`.
    pub fn scores(&self, v: &[f32]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), actual: v.len() });
        }
        Ok((0..self.num_classes()).map(|c| dot_f64(v, self.vector(c))).collect())
    }
}
