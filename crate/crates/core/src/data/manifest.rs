//! Line-delimited JSON dataset manifests.
//!
//! The first line holds dataset-level fields, each following line one
//! video record. Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::embed::{ClassPrototypes, FrameSequence};
use super::vemb::{self, VembTensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Relative path of the `C×D` prototype matrix.
    pub prototypes: String,
    /// Frames per video after resampling; `None` keeps stored lengths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.dim == 0 || h.num_classes < 2 || h.class_names.len() != h.num_classes {
            return Err(Error::Malformed(format!(
                "header: dim {}, {} classes, {} names",
                h.dim,
                h.num_classes,
                h.class_names.len()
            )));
        }
        if h.frames == Some(0) {
            return Err(Error::Malformed("header frames must be positive".into()));
        }
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.video_id.as_str()) {
                return Err(Error::Malformed(format!("duplicate video id {}", r.video_id)));
            }
            if r.frames == 0 {
                return Err(Error::Malformed(format!("{} has no frames", r.video_id)));
            }
            if let Some(l) = r.label {
                if l >= h.num_classes {
                    return Err(Error::IndexOutOfRange { index: l, classes: h.num_classes });
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = match lines.next() {
            Some(l) => serde_json::from_str(l)?,
            None => return Err(Error::Malformed("manifest has no header line".into())),
        };
        let records = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<_>, _>>()?;
        let m = Self { header, records };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        vemb::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Record indices for training and validation.
    ///
    /// Explicit `split` fields win. Otherwise each class contributes its
    /// first `round(n·fraction)` records (in manifest order) to training.
    pub fn split_indices(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        if self.records.iter().any(|r| r.split.is_some()) {
            let (train, val): (Vec<usize>, Vec<usize>) =
                (0..self.records.len()).partition(|&i| self.records[i].split != Some(Split::Val));
            return (train, val);
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut classes: Vec<Option<usize>> = self.records.iter().map(|r| r.label).collect();
        classes.sort();
        classes.dedup();
        for class in classes {
            let members: Vec<usize> =
                (0..self.records.len()).filter(|&i| self.records[i].label == class).collect();
            let n_train = ((members.len() as f64 * fraction).round() as usize).min(members.len());
            train.extend_from_slice(&members[..n_train]);
            val.extend_from_slice(&members[n_train..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    }
}

/// A manifest opened from disk together with its prototypes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub prototypes: ClassPrototypes,
}

impl Dataset {
    /// Opens `dir/manifest.jsonl` and the prototype matrix it names.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        let protos = vemb::read_embeddings(&dir.join(&manifest.header.prototypes))?.into_f32();
        let prototypes = ClassPrototypes::new(manifest.header.class_names.clone(), protos)?;
        if prototypes.dim() != manifest.header.dim {
            return Err(Error::DimMismatch { expected: manifest.header.dim, actual: prototypes.dim() });
        }
        Ok(Self { root: dir.to_path_buf(), manifest, prototypes })
    }

    /// Reads one video, checks it against its record, resamples to the
    /// header frame count and L2-normalizes every frame.
    pub fn load_sequence(&self, rec: &VideoRecord) -> Result<FrameSequence> {
        let t = match vemb::read_embeddings(&self.root.join(&rec.path))? {
            VembTensor::F32(t) => t,
            VembTensor::F64(t) => t.cast(),
        };
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::Malformed(format!("{}: expected T×D, got {s:?}", rec.path))),
        };
        if cols != self.manifest.header.dim {
            return Err(Error::DimMismatch { expected: self.manifest.header.dim, actual: cols });
        }
        if rows != rec.frames {
            return Err(Error::Malformed(format!(
                "{}: manifest says {} frames, file has {rows}",
                rec.video_id, rec.frames
            )));
        }
        let mut seq = FrameSequence::new(rec.video_id.clone(), t, rec.label)?;
        if let Some(target) = self.manifest.header.frames {
            if target != rows {
                seq = seq.resampled(target)?;
            }
        }
        seq.normalized()
    }

    pub fn load_indices(&self, idx: &[usize]) -> Result<Vec<FrameSequence>> {
        idx.iter().map(|&i| self.load_sequence(&self.manifest.records[i])).collect()
    }

    pub fn load_all(&self) -> Result<Vec<FrameSequence>> {
        self.manifest.records.iter().map(|r| self.load_sequence(r)).collect()
    }

    /// Train and validation sequences per [`DatasetManifest::split_indices`].
    pub fn load_split(&self, fraction: f64) -> Result<(Vec<FrameSequence>, Vec<FrameSequence>)> {
        let (train, val) = self.manifest.split_indices(fraction);
        Ok((self.load_indices(&train)?, self.load_indices(&val)?))
    }

    pub fn load_subset(&self, which: Option<Split>, fraction: f64) -> Result<Vec<FrameSequence>> {
        match which {
            None => self.load_all(),
            Some(s) => {
                let (train, val) = self.manifest.split_indices(fraction);
                self.load_indices(if s == Split::Train { &train } else { &val })
            }
        }
    }
}
