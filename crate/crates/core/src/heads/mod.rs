//! Temporal fusion heads: sequence of frame embeddings → one video
//! embedding (or, for majority vote, directly a class).

pub mod baseline;
pub mod lstm;
pub mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::embed::{ClassPrototypes, FrameSequence};
use crate::data::vemb::{self, VembElement};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    MidFrame,
    MaxPool,
    MajorityVote,
    Lstm,
    Transformer,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] =
        [Self::MidFrame, Self::MaxPool, Self::MajorityVote, Self::Lstm, Self::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Self::MidFrame => "mid_frame",
            Self::MaxPool => "max_pool",
            Self::MajorityVote => "majority_vote",
            Self::Lstm => "lstm",
            Self::Transformer => "transformer",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, Self::Lstm | Self::Transformer)
    }

    pub fn emits_embedding(self) -> bool {
        self != Self::MajorityVote
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown head `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::Cls),
            "mean" => Ok(Self::Mean),
            other => Err(Error::ConfigInvalid(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub d_in: usize,
    pub d_out: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pooling: Pooling,
}

impl HeadSpec {
    /// Defaults: joint space and LSTM width equal to `d_in`; two encoder
    /// layers with four heads and a `4·d_model` feed-forward.
    pub fn new(kind: HeadKind, d_in: usize) -> Self {
        Self {
            kind,
            d_in,
            d_out: d_in,
            hidden: d_in,
            d_model: d_in,
            layers: 2,
            heads: 4,
            ffn_dim: 4 * d_in,
            pooling: Pooling::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.d_in == 0 || self.d_out == 0 {
            return bad("d_in and d_out must be positive".into());
        }
        match self.kind {
            HeadKind::Lstm if self.hidden == 0 => bad("LSTM hidden width must be positive".into()),
            HeadKind::Transformer => {
                if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
                    return bad("d_model, heads and ffn_dim must be positive".into());
                }
                if !self.d_model.is_multiple_of(self.heads) {
                    return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
                }
                Ok(())
            }
            HeadKind::MidFrame | HeadKind::MaxPool | HeadKind::MajorityVote if self.d_out != self.d_in => {
                bad("parameter-free heads keep d_out = d_in".into())
            }
            _ => Ok(()),
        }
    }

    /// Names and shapes of every learnable tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        match self.kind {
            HeadKind::Lstm => lstm::layout(self),
            HeadKind::Transformer => transformer::layout(self),
            _ => Vec::new(),
        }
    }
}

/// Learnable tensors of a head, stored in [`HeadSpec::param_layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<R> {
    pub spec: HeadSpec,
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

/// `√(6 / (fan_in + fan_out))`
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded initialization: Xavier-uniform weights, zero biases, unit
/// layer-norm gains, and an LSTM forget-gate bias of 1.
pub fn init_params(spec: &HeadSpec, seed: u64) -> Result<HeadParams<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in spec.param_layout() {
        let n: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let data: Vec<f32> = if name == "lstm.b_f" {
            vec![1.0; n]
        } else if leaf.starts_with('b') {
            vec![0.0; n]
        } else if leaf == "g" {
            vec![1.0; n]
        } else {
            let (fan_in, fan_out) = match shape.as_slice() {
                [a, b] => (*a, *b),
                [a] => (1, *a),
                _ => unreachable!("parameters are rank 1 or 2"),
            };
            let b = xavier_bound(fan_in, fan_out) as f32;
            (0..n).map(|_| rng.random_range(-b..=b)).collect()
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(HeadParams { spec: spec.clone(), names, tensors })
}

impl<R: Real> HeadParams<R> {
    pub fn from_tensors(spec: HeadSpec, tensors: Vec<(String, Tensor<R>)>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} tensors, got {}",
                spec.kind,
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(&tensors) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "expected {name} {shape:?}, got {n} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = tensors.into_iter().unzip();
        Ok(Self { spec, names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn named(&self) -> Vec<(String, Tensor<R>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<S: Real>(&self) -> HeadParams<S> {
        HeadParams {
            spec: self.spec.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every tensor as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<R>) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every tensor as a constant leaf.
    pub fn register_frozen(&self, tape: &mut Tape<R>) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Records the head's forward pass on `frames` (a `T×D_in` leaf) and
    /// returns the unit-norm `1×D_out` embedding.
    pub fn forward(&self, tape: &mut Tape<R>, frames: Var, vars: &[Var]) -> Result<Var> {
        let rows = tape.value(frames).as_matrix_dims()?;
        if rows.1 != self.spec.d_in {
            return Err(Error::DimMismatch { expected: self.spec.d_in, actual: rows.1 });
        }
        match self.spec.kind {
            HeadKind::Lstm => lstm::forward(&self.spec, tape, frames, vars),
            HeadKind::Transformer => transformer::forward(&self.spec, tape, frames, vars, None),
            k => Err(Error::HeadNotTrainable(k.name().into())),
        }
    }

    /// Inference-only embedding of a `T×D_in` frame matrix.
    pub fn embed(&self, frames: &Tensor<R>) -> Result<Vec<R>> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let x = tape.constant(frames.clone())?;
        let out = self.forward(&mut tape, x, &vars)?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl<R: VembElement> HeadParams<R> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::json!({ "format": "videmb-head", "spec": self.spec });
        vemb::encode_bundle(&header, &self.named())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        vemb::write_atomic(path, &self.to_bytes()?)
    }

    /// Hex SHA-256 prefix of the serialized parameters.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

impl HeadParams<f32> {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle = vemb::decode_bundle(bytes)?;
        let spec: HeadSpec = serde_json::from_value(
            bundle
                .header
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Malformed("bundle header has no spec".into()))?,
        )?;
        let tensors = bundle.sections.into_iter().map(|(n, t)| (n, t.into_f32())).collect();
        Self::from_tensors(spec, tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A unit-norm video embedding in the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding {
    pub video_id: String,
    pub vector: Vec<f32>,
    pub head: HeadKind,
}

/// Any of the five heads, ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionHead {
    MidFrame,
    MaxPool,
    MajorityVote,
    Learned(HeadParams<f32>),
}

impl FusionHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            Self::MidFrame => HeadKind::MidFrame,
            Self::MaxPool => HeadKind::MaxPool,
            Self::MajorityVote => HeadKind::MajorityVote,
            Self::Learned(p) => p.spec.kind,
        }
    }

    /// A parameter-free head by kind.
    pub fn baseline(kind: HeadKind) -> Result<Self> {
        match kind {
            HeadKind::MidFrame => Ok(Self::MidFrame),
            HeadKind::MaxPool => Ok(Self::MaxPool),
            HeadKind::MajorityVote => Ok(Self::MajorityVote),
            k => Err(Error::ConfigInvalid(format!("{k} needs parameters"))),
        }
    }

    pub fn fingerprint(&self) -> Result<String> {
        match self {
            Self::Learned(p) => p.fingerprint(),
            other => Ok(other.kind().name().to_string()),
        }
    }

    /// Fuses a preprocessed sequence into a unit-norm embedding.
    pub fn embed(&self, seq: &FrameSequence) -> Result<VideoEmbedding> {
        let vector = match self {
            Self::MidFrame => baseline::fuse_mid_frame(seq)?,
            Self::MaxPool => baseline::fuse_max_pool(seq)?,
            Self::MajorityVote => return Err(Error::HeadNotEmbedding(HeadKind::MajorityVote.name().into())),
            Self::Learned(p) => p.embed(&seq.frames)?,
        };
        Ok(VideoEmbedding { video_id: seq.video_id.clone(), vector, head: self.kind() })
    }

    /// Predicted class: majority vote directly, otherwise the argmax of
    /// dot-product logits against the prototypes.
    pub fn classify(&self, seq: &FrameSequence, protos: &ClassPrototypes) -> Result<usize> {
        match self {
            Self::MajorityVote => baseline::classify_majority_vote(seq, protos),
            _ => {
                let e = self.embed(seq)?;
                let scores = protos.scores(&e.vector)?;
                Ok(crate::data::synth::argmax(&scores))
            }
        }
    }
}
