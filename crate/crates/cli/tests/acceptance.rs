//! Acceptance suite. One PASS/FAIL line per criterion, each run against
//! its wall-clock budget. Exits nonzero if anything fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use videmb::analysis::{cluster_separation, precision_at_k, project_2d};
use videmb::autodiff::softmax_cross_entropy;
use videmb::data::synth::generate;
use videmb::data::vemb::{decode, encode, VembTensor};
use videmb::data::{l2_normalize, FrameSequence, SynthConfig, SynthDataset, TaskKind};
use videmb::gradcheck::{check_head, DEFAULT_STEP, DEFAULT_TOL};
use videmb::heads::{init_params, FusionHead, HeadKind, HeadSpec};
use videmb::retrieval::{brute_force_topk, build_index, RetrievalIndex};
use videmb::train::{evaluate, logits, train, TrainConfig};
use videmb::{Error, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn transformer_spec(d: usize, layers: usize) -> HeadSpec {
    HeadSpec { heads: 2, layers, ..HeadSpec::new(HeadKind::Transformer, d) }
}

fn anchor() -> SynthConfig {
    SynthConfig { classes: 5, videos_per_class: 10, frames: 16, dim: 32, sigma: 0.05, seed: 3, ..SynthConfig::default() }
}

fn gradient_integrity() -> Outcome {
    let mut worst: f64 = 0.0;
    for spec in [HeadSpec::new(HeadKind::Lstm, 6), transformer_spec(6, 1)] {
        let report = ok(check_head(&spec, 4, 0, DEFAULT_STEP, DEFAULT_TOL))?;
        let bad: Vec<&str> = report.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect();
        ensure(bad.is_empty(), || format!("{}: {bad:?} exceed {DEFAULT_TOL}", spec.kind))?;
        worst = worst.max(report.max_rel_error());
    }
    Ok(format!("max rel error {worst:.2e}"))
}

fn order_gap() -> Outcome {
    let cfg = SynthConfig {
        classes: 4,
        videos_per_class: 50,
        val_per_class: 20,
        frames: 20,
        dim: 32,
        task: TaskKind::Order,
        seed: 7,
        ..SynthConfig::default()
    };
    let ds = ok(generate(&cfg))?;
    let (tr, va) = ds.split(0.8);
    ensure(tr.len() == 200 && va.len() == 80, || format!("split {}/{}", tr.len(), va.len()))?;
    let mut parts = Vec::new();
    for kind in [HeadKind::MidFrame, HeadKind::MaxPool] {
        let acc = ok(evaluate(&va, &ok(FusionHead::baseline(kind))?, &ds.prototypes))?.accuracy;
        ensure(acc <= 0.60, || format!("{kind} val accuracy {acc} > 0.60"))?;
        parts.push(format!("{kind} {acc:.3}"));
    }
    for spec in [HeadSpec::new(HeadKind::Lstm, 32), transformer_spec(32, 2)] {
        let mut tc = TrainConfig::new(spec);
        tc.seed = 7;
        tc.threads = 1;
        let out = ok(train(&tr, &va, &ds.prototypes, &tc))?;
        ensure(out.history.len() <= 50, || "more than 50 epochs".into())?;
        let acc = out.history.last().map(|r| r.val_acc).unwrap_or(0.0);
        ensure(acc >= 0.95, || format!("{} val accuracy {acc} < 0.95", tc.head.kind))?;
        parts.push(format!("{} {acc:.3}", tc.head.kind));
    }
    Ok(parts.join(", "))
}

fn anchor_learnability() -> Outcome {
    let ds = ok(generate(&anchor()))?;
    let (tr, va) = ds.split(0.8);
    let mut parts = Vec::new();
    for spec in [HeadSpec::new(HeadKind::Lstm, 32), transformer_spec(32, 2)] {
        let mut tc = TrainConfig::new(spec);
        tc.seed = 3;
        let out = ok(train(&tr, &va, &ds.prototypes, &tc))?;
        ensure(out.history.len() == 50, || format!("history has {} rows", out.history.len()))?;
        let acc = out.history.last().map(|r| r.train_acc).unwrap_or(0.0);
        ensure(acc >= 0.95, || format!("{} train accuracy {acc} < 0.95", tc.head.kind))?;
        parts.push(format!("{} train {acc:.3}", tc.head.kind));
    }
    Ok(parts.join(", "))
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Tensor<f32>, Vec<String>) {
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        // Exact duplicates exercise the id tie-break.
        if i > 0 && rng.random_bool(0.2) {
            let j = rng.random_range(0..i);
            rows.push(rows[j].clone());
            continue;
        }
        let v: Vec<f32> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        rows.push(l2_normalize(&v).expect("nonzero draw"));
    }
    let mut ids: Vec<String> = (0..n).map(|i| format!("v{i:05}")).collect();
    ids.shuffle(rng);
    (Tensor::from_rows(&rows).expect("rectangular"), ids)
}

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut count = 0;
    for t in 0..200 {
        let n = [1, 2, 100, 1000][t % 4];
        let k = [1, 6, n, n + 5][(t / 4) % 4];
        let d = rng.random_range(2..24);
        let (matrix, ids) = random_instance(&mut rng, n, d);
        let index = ok(RetrievalIndex::from_parts(ids.clone(), matrix.clone(), "test".into(), "test".into()))?;
        let q: Vec<f32> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let fast = ok(index.query(&q, k))?;
        let slow = ok(brute_force_topk(&matrix, &ids, &q, k))?;
        ensure(fast.ids() == slow.ids(), || format!("instance {t} (N={n}, k={k}) differs"))?;
        ensure(fast.items.len() == k.min(n), || format!("instance {t}: {} items", fast.items.len()))?;
        count += 1;
    }
    Ok(format!("{count} instances identical"))
}

fn precision_per_class(index: &RetrievalIndex, ds: &SynthDataset) -> Result<f64, String> {
    let mut worst: f64 = 1.0;
    for c in 0..ds.prototypes.num_classes() {
        let relevant: Vec<&str> =
            ds.videos.iter().filter(|v| v.label == Some(c)).map(|v| v.video_id.as_str()).collect();
        let result = ok(index.query(ds.prototypes.vector(c), 6))?;
        worst = worst.min(ok(precision_at_k(&result, &relevant))?);
    }
    Ok(worst)
}

fn retrieval_quality() -> Outcome {
    let ds = ok(generate(&anchor()))?;
    let pooled = ok(build_index(&ds.videos, &FusionHead::MaxPool))?;
    let (tr, va) = ds.split(0.8);
    let mut tc = TrainConfig::new(HeadSpec::new(HeadKind::Lstm, 32));
    tc.seed = 3;
    let lstm = FusionHead::Learned(ok(train(&tr, &va, &ds.prototypes, &tc))?.params);
    let learned = ok(build_index(&ds.videos, &lstm))?;
    let (p_pool, p_lstm) = (precision_per_class(&pooled, &ds)?, precision_per_class(&learned, &ds)?);
    ensure(p_pool == 1.0, || format!("max_pool min precision@6 {p_pool}"))?;
    ensure(p_lstm == 1.0, || format!("lstm min precision@6 {p_lstm}"))?;
    Ok("precision@6 = 1.0 for every class, max_pool and lstm".into())
}

fn oracle_fractions(rows: &[Vec<f64>]) -> [f64; 2] {
    let (n, d) = (rows.len(), rows[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    [ev[0] / cov.trace(), ev[1] / cov.trace()]
}

fn pca_error(rows: &[Vec<f64>]) -> Result<f64, String> {
    let ids: Vec<String> = (0..rows.len()).map(|i| i.to_string()).collect();
    let p = ok(project_2d(&ok(Tensor::from_rows(rows))?, &ids, &vec![None; rows.len()]))?;
    let o = oracle_fractions(rows);
    Ok((p.explained[0] - o[0]).abs().max((p.explained[1] - o[1]).abs()))
}

fn clustering() -> Outcome {
    let ds = ok(generate(&anchor()))?;
    let sep = ok(cluster_separation(&ds.videos))?;
    ensure(sep.ratio < 1.0, || format!("ratio {}", sep.ratio))?;

    // Leading eigenvalues of the anchor embeddings, frames then videos.
    let frames: Vec<Vec<f64>> = ds
        .videos
        .iter()
        .flat_map(|v| (0..v.len()).map(move |t| v.frame(t).iter().map(|&x| x as f64).collect()))
        .collect();
    let videos: Vec<Vec<f64>> = ds
        .videos
        .iter()
        .map(|v| FusionHead::MaxPool.embed(v).unwrap().vector.iter().map(|&x| x as f64).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let aniso: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..16).map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + 0.3 * j as f64)).collect())
        .collect();
    let mut worst: f64 = 0.0;
    for (name, rows) in [("frames", &frames), ("videos", &videos), ("anisotropic", &aniso)] {
        let err = pca_error(rows)?;
        ensure(err < 1e-6, || format!("{name}: explained variance off by {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("ratio {:.4}, max PCA deviation {worst:.1e}", sep.ratio))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path, threads: &str) -> Result<(), String> {
    let steps: [&[&str]; 5] = [
        &["gen", "--out", "data", "--classes", "5", "--videos-per-class", "10", "--frames", "16", "--dim", "32"],
        &["train", "--data", "data", "--head", "lstm", "--out", "lstm.vemb"],
        &["index", "--data", "data", "--head", "lstm", "--params", "lstm.vemb", "--out", "index.vemb"],
        &["query", "--index", "index.vemb", "--data", "data", "--class", "class_03", "--out", "query.json"],
        &["query", "--index", "index.vemb", "--vector", "1,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,1", "--out", "vector.json"],
    ];
    for s in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_videmb"))
            .current_dir(dir)
            .args(["--seed", "5", "--threads", threads])
            .args(s)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || format!("{} failed: {}", s[0], String::from_utf8_lossy(&out.stderr)))?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    let runs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in runs.iter().zip(["1", "1", "4"]) {
        pipeline(dir.path(), threads)?;
    }
    let trees: Vec<_> = runs.iter().map(|d| tree(d.path())).collect();
    ensure(trees[0] == trees[1], || "repeated runs differ".into())?;
    ensure(trees[0] == trees[2], || "thread count changed the artifacts".into())?;
    Ok(format!("{} artifacts byte-identical across 3 runs", trees[0].len()))
}

fn same_bits(a: &VembTensor, b: &VembTensor) -> bool {
    match (a, b) {
        (VembTensor::F32(x), VembTensor::F32(y)) => {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        (VembTensor::F64(x), VembTensor::F64(y)) => {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => false,
    }
}

fn format_robustness() -> Outcome {
    // Tensors hold finite values only; cover signed zero, subnormals and extremes.
    let s64 = vec![0.0, -0.0, 1.0, f64::MIN_POSITIVE / 2.0, f64::MAX, f64::MIN, -1.5e-300, 1.0 / 3.0];
    let s32 = vec![0.0, -0.0, 1.0, f32::MIN_POSITIVE / 2.0, f32::MAX, f32::MIN, -1e-42, 1.0 / 3.0];
    let t64 = ok(Tensor::matrix(2, 4, s64))?;
    let t32 = ok(Tensor::vector(s32))?;
    let mut bytes32 = Vec::new();
    for original in [VembTensor::F64(t64.clone()), VembTensor::F32(t32.clone())] {
        let bytes = match &original {
            VembTensor::F64(t) => ok(encode(t))?,
            VembTensor::F32(t) => ok(encode(t))?,
        };
        ensure(same_bits(&ok(decode(&bytes))?, &original), || "round trip changed bits".into())?;
        bytes32 = bytes;
    }

    let mut magic = bytes32.clone();
    magic[0] = b'X';
    ensure(matches!(decode(&magic), Err(Error::BadMagic)), || "flipped magic not reported".into())?;
    let mut payload = bytes32.clone();
    let mid = payload.len() - 8;
    payload[mid] ^= 0x40;
    ensure(matches!(decode(&payload), Err(Error::ChecksumMismatch { .. })), || "flipped payload bit not reported".into())?;
    for cut in [3, 10, bytes32.len() - 1] {
        ensure(matches!(decode(&bytes32[..cut]), Err(Error::TruncatedFile)), || format!("cut at {cut} not reported"))?;
    }
    Ok("bit-exact round trip; BadMagic, ChecksumMismatch and TruncatedFile raised".into())
}

fn numeric_hygiene() -> Outcome {
    let (loss, _) = ok(softmax_cross_entropy(&ok(Tensor::vector(vec![0.37f64; 25]))?, 11))?;
    let ce_err = (loss - 25f64.ln()).abs();
    ensure(ce_err <= 1e-6, || format!("uniform CE off by {ce_err:e}"))?;

    let ds = ok(generate(&SynthConfig { frames: 9, dim: 24, videos_per_class: 3, seed: 8, ..anchor() }))?;
    let mut tall = ds.videos.clone();
    // Single-frame and long videos too.
    tall.push(ok(FrameSequence::new("one", ok(Tensor::matrix(1, 24, ds.videos[0].frame(0).to_vec()))?, Some(0)))?);
    tall.push(ok(ds.videos[1].resampled(40))?);
    let heads = [
        FusionHead::MidFrame,
        FusionHead::MaxPool,
        FusionHead::Learned(ok(init_params(&HeadSpec::new(HeadKind::Lstm, 24), 1))?),
        FusionHead::Learned(ok(init_params(&transformer_spec(24, 2), 1))?),
    ];
    let mut worst: f64 = 0.0;
    let mut flips = 0;
    for head in &heads {
        for v in &tall {
            let e = ok(head.embed(v))?.vector;
            let norm = e.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            worst = worst.max((norm - 1.0).abs());
            let argmax: Vec<usize> = [0.1, 1.0, 10.0, 100.0]
                .iter()
                .map(|&t| {
                    let z = logits(&e, &ds.prototypes, t).unwrap();
                    (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b })
                })
                .collect();
            flips += usize::from(argmax.windows(2).any(|w| w[0] != w[1]));
        }
    }
    ensure(worst <= 1e-5, || format!("embedding norm off by {worst:e}"))?;
    ensure(flips == 0, || format!("{flips} embeddings changed argmax with temperature"))?;
    Ok(format!("CE error {ce_err:.1e}, max norm deviation {worst:.1e}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient integrity", 60, gradient_integrity),
        ("order task gap", 300, order_gap),
        ("anchor learnability", 180, anchor_learnability),
        ("retrieval exactness", 30, retrieval_exactness),
        ("retrieval quality", 60, retrieval_quality),
        ("frame clustering and PCA", 30, clustering),
        ("pipeline determinism", 600, determinism),
        ("format robustness", 5, format_robustness),
        ("numeric hygiene", 10, numeric_hygiene),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > Duration::from_secs(*budget) => Err(format!("{detail}; over the {budget}s budget")),
            r => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(e) => {
                failed += 1;
                ("FAIL", e)
            }
        };
        println!("{tag} {} {name} [{:.2}s / {budget}s]: {detail}", i + 1, took.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
