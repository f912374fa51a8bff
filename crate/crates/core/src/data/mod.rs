//! Embedding files, dataset manifests, frame sampling and the synthetic
//! dataset generator.

pub mod embed;
pub mod manifest;
pub mod sampling;
pub mod synth;
pub mod vemb;

pub use embed::{l2_normalize, ClassPrototypes, FrameSequence};
pub use manifest::{Dataset, DatasetManifest, ManifestHeader, Split, VideoRecord};
pub use sampling::sample_frames;
pub use synth::{generate_synthetic, SynthConfig, SynthDataset, TaskKind};
