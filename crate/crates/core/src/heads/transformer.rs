//! Pre-layer-norm transformer encoder over the frame sequence with a
//! learned CLS token and sinusoidal positions.

use super::{HeadParams, HeadSpec, Pooling};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const LAYER_PARAMS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

fn projects_input(spec: &HeadSpec) -> bool {
    spec.d_in != spec.d_model
}

pub(super) fn layout(spec: &HeadSpec) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (spec.d_model, spec.ffn_dim);
    let mut out = Vec::new();
    if projects_input(spec) {
        out.push(("in.w".into(), vec![spec.d_in, d]));
        out.push(("in.b".into(), vec![d]));
    }
    out.push(("cls".into(), vec![d]));
    for l in 0..spec.layers {
        for name in LAYER_PARAMS {
            let shape = match name {
                "ffn.w1" => vec![d, f],
                "ffn.b1" => vec![f],
                "ffn.w2" => vec![f, d],
                n if n.contains(".w") => vec![d, d],
                _ => vec![d],
            };
            out.push((format!("layer{l}.{name}"), shape));
        }
    }
    out.push(("out.w".into(), vec![d, spec.d_out]));
    out.push(("out.b".into(), vec![spec.d_out]));
    out
}

/// Sinusoidal encodings: `pe[p][2i] = sin(p / 10000^(2i/d))`,
/// `pe[p][2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding<R: Real>(positions: usize, d: usize) -> Tensor<R> {
    let mut data = Vec::with_capacity(positions * d);
    for p in 0..positions {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d as f64);
            data.push(R::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![positions, d], data)
}

fn linear<R: Real>(tape: &mut Tape<R>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub(super) fn forward<R: Real>(
    spec: &HeadSpec,
    tape: &mut Tape<R>,
    frames: Var,
    vars: &[Var],
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if !spec.d_model.is_multiple_of(spec.heads) {
        return Err(Error::ConfigInvalid(format!(
            "d_model {} not divisible by {} heads",
            spec.d_model, spec.heads
        )));
    }
    let steps = tape.value(frames).as_matrix_dims()?.0;
    let d = spec.d_model;
    let dk = d / spec.heads;
    let mut next = vars.iter().copied();
    let mut take = || next.next().expect("parameter count matches layout");

    let mut x = frames;
    if projects_input(spec) {
        let (w, b) = (take(), take());
        x = linear(tape, x, w, b)?;
    }
    let cls = tape.reshape(take(), vec![1, d])?;
    let seq = tape.concat_rows(&[cls, x])?;
    let pe = tape.constant(positional_encoding(steps + 1, d))?;
    let mut h = tape.add(seq, pe)?;

    let inv_sqrt_dk = R::from_f64_lossy(1.0 / (dk as f64).sqrt());
    for _ in 0..spec.layers {
        let p: Vec<Var> = (0..LAYER_PARAMS.len()).map(|_| take()).collect();
        let a = tape.layer_norm_rows(h, p[0], p[1])?;
        let q = linear(tape, a, p[2], p[3])?;
        let k = linear(tape, a, p[4], p[5])?;
        let v = linear(tape, a, p[6], p[7])?;
        let mut heads = Vec::with_capacity(spec.heads);
        for hd in 0..spec.heads {
            let qh = tape.slice_cols(q, hd * dk, dk)?;
            let kh = tape.slice_cols(k, hd * dk, dk)?;
            let vh = tape.slice_cols(v, hd * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt_dk)?;
            let attn = tape.softmax_rows(scores)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(attn);
            }
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = linear(tape, merged, p[8], p[9])?;
        h = tape.add(h, o)?;

        let b = tape.layer_norm_rows(h, p[10], p[11])?;
        let f = linear(tape, b, p[12], p[13])?;
        let f = tape.relu(f)?;
        let f = linear(tape, f, p[14], p[15])?;
        h = tape.add(h, f)?;
    }

    let pooled = match spec.pooling {
        Pooling::Cls => tape.slice_rows(h, 0, 1)?,
        Pooling::Mean => {
            let frames_out = tape.slice_rows(h, 1, steps)?;
            tape.mean_rows(frames_out)?
        }
    };
    let (w_out, b_out) = (take(), take());
    let y = linear(tape, pooled, w_out, b_out)?;
    tape.l2_normalize(y)
}

/// Attention probability matrices, `(T+1)×(T+1)` each, ordered by layer
/// then head.
pub fn attention_weights<R: Real>(params: &HeadParams<R>, frames: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape)?;
    let x = tape.constant(frames.clone())?;
    let mut trace = Vec::new();
    forward(&params.spec, &mut tape, x, &vars, Some(&mut trace))?;
    Ok(trace.into_iter().map(|v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, HeadKind, HeadSpec};
    use super::*;

    fn spec(layers: usize) -> HeadSpec {
        HeadSpec { layers, heads: 2, ..HeadSpec::new(HeadKind::Transformer, 6) }
    }

    fn frames(t: usize, d: usize, phase: f64) -> Tensor<f64> {
        Tensor::matrix(t, d, (0..t * d).map(|i| (i as f64 * 0.61 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn layout_counts() {
        let s = spec(2);
        assert_eq!(s.param_layout().len(), 1 + 2 * 16 + 2);
        let projected = HeadSpec { d_model: 8, ..s };
        assert_eq!(projected.param_layout()[0], ("in.w".to_string(), vec![6, 8]));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(2)[0] - 2f64.sin()).abs() < 1e-15);
        assert!((pe.row(2)[3] - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn zero_layers_read_only_the_cls_token() {
        let p = init_params(&spec(0), 2).unwrap().cast::<f64>();
        let a = p.embed(&frames(3, 6, 0.0)).unwrap();
        let b = p.embed(&frames(7, 6, 1.3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let mut p = init_params(&spec(1), 2).unwrap().cast::<f64>();
        for name in ["layer0.attn.wq", "layer0.attn.wk"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let t = 5;
        let maps = attention_weights(&p, &frames(t, 6, 0.4)).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert_eq!(m.shape(), &[t + 1, t + 1]);
            assert!(m.data().iter().all(|&w| (w - 1.0 / (t + 1) as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn single_frame_is_finite_and_unit_norm() {
        let p = init_params(&spec(2), 8).unwrap();
        let x: Tensor<f32> = frames(1, 6, 0.2).cast();
        let e = p.embed(&x).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        let n: f64 = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mean_pooling_and_projection_run() {
        let s = HeadSpec { pooling: Pooling::Mean, d_model: 8, d_out: 5, ..spec(1) };
        let p = init_params(&s, 1).unwrap().cast::<f64>();
        let e = p.embed(&frames(4, 6, 0.0)).unwrap();
        assert_eq!(e.len(), 5);
        assert_eq!(e, p.embed(&frames(4, 6, 0.0)).unwrap());
    }
}
