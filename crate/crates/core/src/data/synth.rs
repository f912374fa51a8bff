//! Seeded synthetic stand-ins for encoded video frames.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), a counter-based stream
//! cipher generator whose output is fixed by its documented algorithm.
//! Stream 0 of the seed produces class directions; video `j` (global
//! position in the manifest) draws its noise from stream `j + 1`, so every
//! video can be generated independently and in any order.
//!
//! * `anchor`: class `c` owns a unit prototype `p_c`; frame `t` is
//!   `normalize(p_c + σ·w_t)` with AR(1) noise
//!   `w_t = ρ·w_{t−1} + √(1−ρ²)·ε_t`, `ε_t ~ N(0, I)`.
//! * `order`: classes come in pairs sharing two anchors `a`, `b`. The
//!   even class walks `a → b`, the odd class `b → a` (linear interpolation
//!   over the frames, plus the same AR(1) noise). The pair's prototypes are
//!   `normalize(a + b ± r)` for a third direction `r`, so only the temporal
//!   order tells the two classes apart.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::{l2_normalize, ClassPrototypes, FrameSequence};
use super::manifest::{DatasetManifest, ManifestHeader, Split, VideoRecord, MANIFEST_FILE};
use super::vemb;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROTOTYPE_FILE: &str = "prototypes.vemb";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Anchor,
    Order,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Anchor => "anchor",
            Self::Order => "order",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(Self::Anchor),
            "order" | "order-sensitive" => Ok(Self::Order),
            other => Err(Error::ConfigInvalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Training videos per class.
    pub videos_per_class: usize,
    /// Extra validation videos per class. When zero, records carry no
    /// split field and the trainer splits by fraction.
    pub val_per_class: usize,
    pub frames: usize,
    pub dim: usize,
    pub sigma: f64,
    pub rho: f64,
    pub task: TaskKind,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 25,
            videos_per_class: 10,
            val_per_class: 0,
            frames: 100,
            dim: 1024,
            sigma: 0.05,
            rho: 0.5,
            task: TaskKind::Anchor,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.videos_per_class == 0 || self.frames == 0 || self.dim == 0 {
            return bad("videos_per_class, frames and dim must be positive".into());
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad(format!("sigma must lie in (0, 1), got {}", self.sigma));
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if self.task == TaskKind::Order && !self.classes.is_multiple_of(2) {
            return bad(format!("order task needs an even class count, got {}", self.classes));
        }
        Ok(())
    }

    pub fn total_per_class(&self) -> usize {
        self.videos_per_class + self.val_per_class
    }
}

/// Generated data held in memory.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub prototypes: ClassPrototypes,
    pub videos: Vec<FrameSequence>,
    pub splits: Vec<Option<Split>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `n` unit directions; orthonormal (Gram–Schmidt) when `d ≥ n`.
fn directions(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = normal_vec(rng, d);
        if d >= n {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.push(v.iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn combine(terms: &[(f64, &[f64])], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (w, v) in terms {
        out.iter_mut().zip(*v).for_each(|(o, x)| *o += w * x);
    }
    out
}

struct ClassPath {
    start: Vec<f64>,
    end: Vec<f64>,
}

impl ClassPath {
    fn mean_at(&self, t: usize, frames: usize) -> Vec<f64> {
        let s = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
        combine(&[(1.0 - s, &self.start), (s, &self.end)], self.start.len())
    }
}

fn video_frames(cfg: &SynthConfig, path: &ClassPath, stream: u64) -> Result<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let d = cfg.dim;
    let innov = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut w = normal_vec(&mut rng, d);
    let mut out = Vec::with_capacity(cfg.frames * d);
    for t in 0..cfg.frames {
        if t > 0 {
            let eps = normal_vec(&mut rng, d);
            w.iter_mut().zip(&eps).for_each(|(wi, e)| *wi = cfg.rho * *wi + innov * e);
        }
        let mean = path.mean_at(t, cfg.frames);
        let raw = combine(&[(1.0, &mean), (cfg.sigma, &w)], d);
        out.extend(l2_normalize(&raw)?.into_iter().map(|x| x as f32));
    }
    Ok(out)
}

pub fn class_name(c: usize) -> String {
    format!("class_{c:02}")
}

/// Builds the dataset in memory. Deterministic for a fixed config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (c, d) = (cfg.classes, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);

    let (protos, paths): (Vec<Vec<f64>>, Vec<ClassPath>) = match cfg.task {
        TaskKind::Anchor => {
            let dirs = directions(&mut rng, c, d);
            let paths = dirs.iter().map(|p| ClassPath { start: p.clone(), end: p.clone() }).collect();
            (dirs, paths)
        }
        TaskKind::Order => {
            let dirs = directions(&mut rng, 3 * c / 2, d);
            let mut protos = Vec::with_capacity(c);
            let mut paths = Vec::with_capacity(c);
            for k in 0..c / 2 {
                let (a, b, r) = (&dirs[3 * k], &dirs[3 * k + 1], &dirs[3 * k + 2]);
                protos.push(l2_normalize(&combine(&[(1.0, a), (1.0, b), (1.0, r)], d))?);
                protos.push(l2_normalize(&combine(&[(1.0, a), (1.0, b), (-1.0, r)], d))?);
                paths.push(ClassPath { start: a.clone(), end: b.clone() });
                paths.push(ClassPath { start: b.clone(), end: a.clone() });
            }
            (protos, paths)
        }
    };
    let names: Vec<String> = (0..c).map(class_name).collect();
    let proto_rows: Vec<Vec<f32>> = protos.iter().map(|p| p.iter().map(|&x| x as f32).collect()).collect();
    let prototypes = ClassPrototypes::from_raw(names, &proto_rows)?;

    let per_class = cfg.total_per_class();
    let jobs: Vec<(usize, usize)> = (0..c).flat_map(|k| (0..per_class).map(move |j| (k, j))).collect();
    let videos = jobs
        .par_iter()
        .enumerate()
        .map(|(pos, &(k, j))| {
            let data = video_frames(cfg, &paths[k], pos as u64 + 1)?;
            let id = format!("{}_{j:04}", class_name(k));
            FrameSequence::new(id, Tensor::matrix(cfg.frames, d, data)?, Some(k))
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = jobs
        .iter()
        .map(|&(_, j)| match cfg.val_per_class {
            0 => None,
            _ if j < cfg.videos_per_class => Some(Split::Train),
            _ => Some(Split::Val),
        })
        .collect();

    let ds = SynthDataset { config: cfg.clone(), prototypes, videos, splits };
    if cfg.task == TaskKind::Anchor && cfg.sigma <= 0.1 {
        let acc = ds.frame_separability()?;
        if acc < 0.99 {
            return Err(Error::DegenerateData(format!(
                "anchor data only {acc:.3} frame-separable by its prototypes"
            )));
        }
    }
    Ok(ds)
}

impl SynthDataset {
    /// Fraction of frames whose nearest prototype (max dot product) is the
    /// video's own class.
    pub fn frame_separability(&self) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for v in &self.videos {
            for t in 0..v.len() {
                let s = self.prototypes.scores(v.frame(t))?;
                let best = argmax(&s);
                hits += usize::from(Some(best) == v.label);
                total += 1;
            }
        }
        Ok(hits as f64 / total.max(1) as f64)
    }

    pub fn manifest(&self) -> DatasetManifest {
        let cfg = &self.config;
        DatasetManifest {
            header: ManifestHeader {
                dim: cfg.dim,
                num_classes: cfg.classes,
                class_names: self.prototypes.names().to_vec(),
                prototypes: PROTOTYPE_FILE.into(),
                frames: Some(cfg.frames),
                seed: Some(cfg.seed),
                task: Some(cfg.task.name().into()),
            },
            records: self
                .videos
                .iter()
                .zip(&self.splits)
                .map(|(v, s)| VideoRecord {
                    video_id: v.video_id.clone(),
                    path: format!("videos/{}.vemb", v.video_id),
                    label: v.label,
                    frames: v.len(),
                    split: *s,
                })
                .collect(),
        }
    }

    /// Writes prototypes, one file per video and the manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let manifest = self.manifest();
        std::fs::create_dir_all(dir.join("videos"))?;
        vemb::write_embeddings(&dir.join(PROTOTYPE_FILE), self.prototypes.vectors())?;
        self.videos
            .par_iter()
            .zip(&manifest.records)
            .try_for_each(|(v, r)| vemb::write_embeddings(&dir.join(&r.path), &v.frames))?;
        manifest.save(&dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Training and validation sequences: explicit splits when the config
    /// asked for validation videos, otherwise the stratified fraction rule.
    pub fn split(&self, fraction: f64) -> (Vec<FrameSequence>, Vec<FrameSequence>) {
        let (train, val) = self.manifest().split_indices(fraction);
        (
            train.iter().map(|&i| self.videos[i].clone()).collect(),
            val.iter().map(|&i| self.videos[i].clone()).collect(),
        )
    }
}

/// Generates the dataset and writes it to `dir`.
pub fn generate_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<(DatasetManifest, ClassPrototypes)> {
    let ds = generate(cfg)?;
    let manifest = ds.write(dir)?;
    Ok((manifest, ds.prototypes))
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
