//! One function per subcommand. Every argument check that can fail runs
//! before the first file is written.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use videmb::analysis::{cluster_separation, project_2d, ClusterSeparation};
use videmb::data::synth::generate;
use videmb::data::vemb::{self, VembTensor};
use videmb::data::{Dataset, FrameSequence, SynthConfig};
use videmb::gradcheck::check_head;
use videmb::heads::{FusionHead, HeadKind, HeadParams, HeadSpec};
use videmb::optim::AdamConfig;
use videmb::retrieval::{build_index, RetrievalIndex};
use videmb::train::{evaluate_with_threads, train, TrainConfig};
use videmb::Tensor;

use crate::args::*;
use crate::serve::{self, QueryResponse};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation: reported with exit code 2 before any output.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] videmb::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn check_fraction(split: f64) -> CliResult {
    if !(split > 0.0 && split < 1.0) {
        return usage(format!("--split must lie strictly between 0 and 1, got {split}"));
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value)? + "\n";
    if let Some(path) = out {
        vemb::write_atomic(path, text.as_bytes())?;
    }
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

pub fn run(cli: Cli) -> CliResult {
    let threads = cli.threads as usize;
    // A second global pool in the same process keeps the first one.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Gen(a) => gen(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Encode(a) => encode(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Project(a) => project(a),
        Command::Gradcheck(a) => gradcheck(a, cli.seed),
        Command::Serve(a) => serve::run(a, threads),
    }
}

fn gen(a: GenArgs, seed: u64) -> CliResult {
    let cfg = SynthConfig {
        classes: a.classes,
        videos_per_class: a.videos_per_class,
        val_per_class: a.val_per_class,
        frames: a.frames,
        dim: a.dim,
        sigma: a.sigma,
        rho: a.rho,
        task: a.task.into(),
        seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = generate(&cfg)?;
    let manifest = ds.write(&a.out)?;
    eprintln!(
        "wrote {} videos ({} classes, {}x{}) to {}",
        manifest.records.len(),
        cfg.classes,
        cfg.frames,
        cfg.dim,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: u64, threads: usize) -> CliResult {
    check_fraction(a.split)?;
    let data = Dataset::open(&a.data)?;
    let d = data.manifest.header.dim;
    let kind = match a.head {
        TrainableHead::Lstm => HeadKind::Lstm,
        TrainableHead::Transformer => HeadKind::Transformer,
    };
    let mut spec = HeadSpec::new(kind, d);
    spec.hidden = a.hidden.unwrap_or(d);
    spec.d_model = a.d_model.unwrap_or(d);
    spec.ffn_dim = a.ffn_dim.unwrap_or(4 * spec.d_model);
    spec.layers = a.layers;
    spec.heads = a.heads;
    spec.pooling = a.pooling.into();
    let cfg = TrainConfig {
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        seed,
        temperature: a.temperature,
        head: spec,
        split: a.split,
        threads,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let history_path = a.history.unwrap_or_else(|| a.out.with_extension("csv"));

    let (tr, va) = data.load_split(a.split)?;
    eprintln!("training {kind} on {} videos, validating on {}", tr.len(), va.len());
    let out = train(&tr, &va, &data.prototypes, &cfg)?;
    for r in &out.history.epochs {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}  ({:.2}s)",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
        );
    }
    out.params.save(&a.out)?;
    vemb::write_atomic(&history_path, out.history.to_csv().as_bytes())?;
    eprintln!("saved {} ({})", a.out.display(), out.params.fingerprint()?);
    Ok(())
}

/// Builds the requested head, loading parameters for learned kinds and
/// checking them against the embedding width.
fn load_head(kind: HeadArg, params: Option<&PathBuf>, dim: Option<usize>) -> CliResult<FusionHead> {
    let kind: HeadKind = kind.into();
    if !kind.is_trainable() {
        if params.is_some() {
            return usage(format!("--params does not apply to {kind}"));
        }
        return Ok(FusionHead::baseline(kind)?);
    }
    let Some(path) = params else {
        return usage(format!("{kind} needs --params"));
    };
    let p = HeadParams::load(path)?;
    if p.spec.kind != kind {
        return usage(format!("{} holds a {} head, not {kind}", path.display(), p.spec.kind));
    }
    if let Some(d) = dim {
        if p.spec.d_in != d {
            return Err(videmb::Error::DimMismatch { expected: d, actual: p.spec.d_in }.into());
        }
    }
    Ok(FusionHead::Learned(p))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    head: &'a str,
    subset: &'a str,
    accuracy: f64,
    correct: usize,
    total: usize,
    class_names: &'a [String],
    /// Rows are true classes, columns predictions.
    confusion: Vec<Vec<usize>>,
}

fn subset_name(s: SubsetArg) -> &'static str {
    match s {
        SubsetArg::All => "all",
        SubsetArg::Train => "train",
        SubsetArg::Val => "val",
    }
}

fn eval(a: EvalArgs, threads: usize) -> CliResult {
    check_fraction(a.split)?;
    let data = Dataset::open(&a.data)?;
    let head = load_head(a.head.head, a.head.params.as_ref(), Some(data.manifest.header.dim))?;
    let seqs = data.load_subset(a.subset.split(), a.split)?;
    let ev = evaluate_with_threads(&seqs, &head, &data.prototypes, threads)?;
    let report = EvalReport {
        head: head.kind().name(),
        subset: subset_name(a.subset),
        accuracy: ev.accuracy,
        correct: ev.correct,
        total: ev.total,
        class_names: data.prototypes.names(),
        confusion: ev.confusion,
    };
    print_json(&report, a.out.as_deref())
}

fn encode(a: EncodeArgs) -> CliResult {
    if a.frames == Some(0) {
        return usage("--frames must be positive");
    }
    let frames = match vemb::read_embeddings(&a.input)? {
        VembTensor::F32(t) => t,
        VembTensor::F64(t) => t.cast(),
    };
    if frames.rank() != 2 {
        return Err(CliError::Failed(format!("{} is not a T×D frame matrix", a.input.display())));
    }
    let head = load_head(a.head.head, a.head.params.as_ref(), Some(frames.shape()[1]))?;
    let id = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut seq = FrameSequence::new(id, frames, None)?;
    if let Some(t) = a.frames {
        seq = seq.resampled(t)?;
    }
    let e = head.embed(&seq.normalized()?)?;
    match &a.out {
        Some(path) => vemb::write_embeddings(path, &Tensor::vector(e.vector)?)?,
        None => print_json(&serde_json::json!({ "video_id": e.video_id, "head": e.head.name(), "vector": e.vector }), None)?,
    }
    Ok(())
}

fn index(a: IndexArgs) -> CliResult {
    check_fraction(a.split)?;
    let data = Dataset::open(&a.data)?;
    let head = load_head(a.head.head, a.head.params.as_ref(), Some(data.manifest.header.dim))?;
    if !head.kind().emits_embedding() {
        return usage(format!("{} classifies directly and cannot build an index", head.kind()));
    }
    let seqs = data.load_subset(a.subset.split(), a.split)?;
    let idx = build_index(&seqs, &head)?;
    idx.save(&a.out)?;
    eprintln!("indexed {} videos (dim {}) with {} -> {}", idx.len(), idx.dim(), idx.head(), a.out.display());
    Ok(())
}

fn query(a: QueryArgs) -> CliResult {
    let idx = RetrievalIndex::load(&a.index)?;
    let vector: Vec<f32> = if let Some(class) = &a.class {
        let data = Dataset::open(a.data.as_ref().expect("clap requires --data with --class"))?;
        let c = data
            .prototypes
            .index_of(class)
            .ok_or_else(|| CliError::Failed(format!("unknown class {class}")))?;
        data.prototypes.vector(c).to_vec()
    } else if let Some(v) = a.vector {
        v
    } else {
        let path = a.embedding.as_ref().expect("clap requires one query source");
        match vemb::read_embeddings(path)? {
            VembTensor::F32(t) => t.into_data(),
            VembTensor::F64(t) => t.cast::<f32>().into_data(),
        }
    };
    let ranked = idx.query(&vector, a.k as usize)?;
    print_json(&QueryResponse::new(&ranked, idx.fingerprint()), a.out.as_deref())
}

#[derive(Serialize)]
struct ProjectSummary {
    level: &'static str,
    points: usize,
    explained_variance: [f64; 2],
    cluster_separation: ClusterSeparation,
}

fn project(a: ProjectArgs) -> CliResult {
    check_fraction(a.split)?;
    let data = Dataset::open(&a.data)?;
    let head = match a.level {
        Level::Videos => Some(load_head(a.head, a.params.as_ref(), Some(data.manifest.header.dim))?),
        Level::Frames => None,
    };
    if let Some(h) = &head {
        if !h.kind().emits_embedding() {
            return usage(format!("{} emits no embedding to project", h.kind()));
        }
    }
    let seqs = data.load_subset(a.subset.split(), a.split)?;
    let names = data.prototypes.names();
    let label = |s: &FrameSequence| s.label.map(|l| names[l].clone());
    let (mut ids, mut labels, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for s in &seqs {
        match &head {
            Some(h) => {
                ids.push(s.video_id.clone());
                labels.push(label(s));
                rows.push(h.embed(s)?.vector);
            }
            None => {
                for t in 0..s.len() {
                    ids.push(format!("{}#{t}", s.video_id));
                    labels.push(label(s));
                    rows.push(s.frame(t).to_vec());
                }
            }
        }
    }
    let sep = cluster_separation(&seqs)?;
    let proj = project_2d(&Tensor::from_rows(&rows)?, &ids, &labels)?;
    vemb::write_atomic(&a.out, proj.to_csv().as_bytes())?;
    let summary = ProjectSummary {
        level: match a.level {
            Level::Frames => "frames",
            Level::Videos => "videos",
        },
        points: rows.len(),
        explained_variance: proj.explained,
        cluster_separation: sep,
    };
    print_json(&summary, None)
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> CliResult {
    if a.frames == 0 || a.dim == 0 {
        return usage("--frames and --dim must be positive");
    }
    let spec = match a.head {
        TrainableHead::Lstm => HeadSpec::new(HeadKind::Lstm, a.dim),
        TrainableHead::Transformer => HeadSpec { layers: a.layers, heads: a.heads, ..HeadSpec::new(HeadKind::Transformer, a.dim) },
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = check_head(&spec, a.frames, seed, a.step, a.tol)?;
    for p in &report.params {
        println!(
            "{:<20} {:>6} elems  max rel err {:.3e}  {}",
            p.name,
            p.elements,
            p.max_rel_error,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max rel err {:.3e} (tol {:e}, step {:e})", report.max_rel_error(), report.tol, report.step);
    if !report.passed() {
        return Err(CliError::Failed("gradient check failed".into()));
    }
    Ok(())
}
