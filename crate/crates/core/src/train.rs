//! Dot-product classification against frozen prototypes: logits, the
//! cross-entropy training loop and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::embed::{ClassPrototypes, FrameSequence};
use crate::data::synth::argmax;
use crate::error::{Error, Result};
use crate::heads::{init_params, FusionHead, HeadParams, HeadSpec};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 10.0;

/// `z_c = τ·⟨v, p_c⟩`.
pub fn logits(v: &[f32], protos: &ClassPrototypes, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::ConfigInvalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(protos.scores(v)?.into_iter().map(|s| temperature * s).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub head: HeadSpec,
    /// Training fraction when the manifest carries no explicit split.
    pub split: f64,
    /// Worker threads for per-sample gradients and evaluation.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(head: HeadSpec) -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 50,
            batch_size: 16,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            head,
            split: 0.8,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.adam.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.adam.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return bad("epochs, batch_size and threads must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split must lie in (0, 1), got {}", self.split));
        }
        if !self.head.kind.is_trainable() {
            return Err(Error::HeadNotTrainable(self.head.kind.name().into()));
        }
        self.head.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// `epoch,train_loss,val_loss,train_acc,val_acc`, one row per epoch.
    /// Wall-clock times are left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: HeadParams<f32>,
    pub history: TrainHistory,
}

fn label_of(seq: &FrameSequence, classes: usize) -> Result<usize> {
    let l = seq
        .label
        .ok_or_else(|| Error::Malformed(format!("video {} has no label", seq.video_id)))?;
    if l >= classes {
        return Err(Error::IndexOutOfRange { index: l, classes });
    }
    Ok(l)
}

/// Loss, predicted class and parameter gradients for one labelled video.
pub struct SampleGrad {
    pub loss: f64,
    pub predicted: usize,
    pub grads: Vec<Vec<f32>>,
}

/// Forward and backward pass of `CE(τ·⟨fuse(seq), P⟩, label)`.
pub fn sample_gradient(
    params: &HeadParams<f32>,
    seq: &FrameSequence,
    protos_t: &Tensor<f32>,
    temperature: f32,
) -> Result<SampleGrad> {
    let classes = protos_t.shape()[1];
    let label = label_of(seq, classes)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let x = tape.constant(seq.frames.clone())?;
    let p = tape.constant(protos_t.clone())?;
    let emb = params.forward(&mut tape, x, &vars)?;
    let z = tape.matmul(emb, p)?;
    let z = tape.scale(z, temperature)?;
    let predicted = argmax(&tape.value(z).data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let loss = tape.softmax_cross_entropy(z, label)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    let g = tape.backward(loss)?;
    Ok(SampleGrad { loss: loss_value, predicted, grads: vars.iter().map(|&v| g.get_or_zeros(v)).collect() })
}

/// Mean cross-entropy and accuracy of an embedding head, computed in a
/// fixed summation order.
pub fn loss_and_accuracy(
    head: &FusionHead,
    seqs: &[FrameSequence],
    protos: &ClassPrototypes,
    temperature: f64,
) -> Result<(f64, f64)> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<(f64, bool)> = seqs
        .par_iter()
        .map(|s| {
            let label = label_of(s, protos.num_classes())?;
            let e = head.embed(s)?;
            let z = logits(&e.vector, protos, temperature)?;
            let zt = Tensor::vector(z.clone())?;
            let (loss, _) = crate::autodiff::softmax_cross_entropy(&zt, label)?;
            Ok((loss, argmax(&z) == label))
        })
        .collect::<Result<_>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let acc = per.iter().filter(|p| p.1).count() as f64 / per.len() as f64;
    Ok((loss, acc))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::ConfigInvalid(e.to_string()))
}

/// Trains an LSTM or transformer head with mini-batch Adam on softmax
/// cross-entropy over temperature-scaled dot-product logits. Prototypes
/// stay frozen. Bit-reproducible for a fixed config, independent of
/// `threads`.
pub fn train(
    train_set: &[FrameSequence],
    val_set: &[FrameSequence],
    protos: &ClassPrototypes,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.head.d_out != protos.dim() {
        return Err(Error::DimMismatch { expected: protos.dim(), actual: cfg.head.d_out });
    }
    for s in train_set.iter().chain(val_set) {
        label_of(s, protos.num_classes())?;
        if s.dim() != cfg.head.d_in {
            return Err(Error::DimMismatch { expected: cfg.head.d_in, actual: s.dim() });
        }
    }

    let workers = pool(cfg.threads)?;
    workers.install(|| {
        let mut params = init_params(&cfg.head, cfg.seed)?;
        let mut opt = Adam::new(cfg.adam, params.tensors());
        let protos_t = protos.transposed();
        let tau = cfg.temperature as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut history = TrainHistory::default();

        for epoch in 1..=cfg.epochs {
            let started = Instant::now();
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let per_sample: Vec<SampleGrad> = batch
                    .par_iter()
                    .map(|&i| sample_gradient(&params, &train_set[i], &protos_t, tau))
                    .collect::<Result<_>>()?;
                let mut total: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                for s in &per_sample {
                    for (acc, g) in total.iter_mut().zip(&s.grads) {
                        acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                total.iter_mut().flatten().for_each(|g| *g *= inv);
                opt.step(params.tensors_mut().iter_mut(), &total)?;
            }

            let head = FusionHead::Learned(params.clone());
            let (train_loss, train_acc) = loss_and_accuracy(&head, train_set, protos, cfg.temperature)?;
            let (val_loss, val_acc) = loss_and_accuracy(&head, val_set, protos, cfg.temperature)?;
            history.epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
                train_acc,
                val_acc,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        Ok(TrainOutcome { params, history })
    })
}

/// Top-1 accuracy and a `C×C` confusion matrix (rows: true class,
/// columns: predicted class).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: Vec<Vec<usize>>,
}

/// Classifies every labelled video with `head`. Majority vote predicts
/// directly; embedding heads predict the argmax logit.
pub fn evaluate(seqs: &[FrameSequence], head: &FusionHead, protos: &ClassPrototypes) -> Result<Evaluation> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = protos.num_classes();
    let preds: Vec<(usize, usize)> = seqs
        .par_iter()
        .map(|s| Ok((label_of(s, c)?, head.classify(s, protos)?)))
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut correct = 0;
    for &(truth, pred) in &preds {
        confusion[truth][pred] += 1;
        correct += usize::from(truth == pred);
    }
    Ok(Evaluation { accuracy: correct as f64 / preds.len() as f64, correct, total: preds.len(), confusion })
}

/// [`evaluate`] on a dedicated pool of `threads` workers.
pub fn evaluate_with_threads(
    seqs: &[FrameSequence],
    head: &FusionHead,
    protos: &ClassPrototypes,
    threads: usize,
) -> Result<Evaluation> {
    pool(threads.max(1))?.install(|| evaluate(seqs, head, protos))
}
