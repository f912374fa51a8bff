//! Single-layer LSTM over the frame sequence; the video embedding is the
//! projected final hidden state.
//!
//! Row-vector convention: `gate = σ(x·W + h·U + b)`.
//!
//! ```text
//! i, f, o = σ(·)     g = tanh(·)
//! c_t = f ∘ c_{t−1} + i ∘ g
//! h_t = o ∘ tanh(c_t)
//! out = normalize(h_T · W_out + b_out)
//! ```

use super::HeadSpec;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Real;

const GATES: [&str; 4] = ["i", "f", "g", "o"];

pub(super) fn layout(spec: &HeadSpec) -> Vec<(String, Vec<usize>)> {
    let (d, h) = (spec.d_in, spec.hidden);
    let mut out = Vec::new();
    for g in GATES {
        out.push((format!("lstm.w_{g}"), vec![d, h]));
        out.push((format!("lstm.u_{g}"), vec![h, h]));
        out.push((format!("lstm.b_{g}"), vec![h]));
    }
    out.push(("out.w".into(), vec![h, spec.d_out]));
    out.push(("out.b".into(), vec![spec.d_out]));
    out
}

struct Gate {
    w: Var,
    u: Var,
    b: Var,
}

fn pre_activation<R: Real>(tape: &mut Tape<R>, x: Var, h: Option<Var>, gate: &Gate) -> Result<Var> {
    let mut z = tape.matmul(x, gate.w)?;
    if let Some(h) = h {
        let r = tape.matmul(h, gate.u)?;
        z = tape.add(z, r)?;
    }
    tape.add_row(z, gate.b)
}

pub(super) fn forward<R: Real>(spec: &HeadSpec, tape: &mut Tape<R>, frames: Var, vars: &[Var]) -> Result<Var> {
    let gates: Vec<Gate> = (0..4).map(|k| Gate { w: vars[3 * k], u: vars[3 * k + 1], b: vars[3 * k + 2] }).collect();
    let (w_out, b_out) = (vars[12], vars[13]);
    let steps = tape.value(frames).as_matrix_dims()?.0;
    debug_assert_eq!(vars.len(), layout(spec).len());

    // h₀ = c₀ = 0, so the recurrent terms vanish at the first step.
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    for t in 0..steps {
        let x = tape.slice_rows(frames, t, 1)?;
        let zi = pre_activation(tape, x, h, &gates[0])?;
        let zf = pre_activation(tape, x, h, &gates[1])?;
        let zg = pre_activation(tape, x, h, &gates[2])?;
        let zo = pre_activation(tape, x, h, &gates[3])?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let ig = tape.mul(i, g)?;
        let c_new = match c {
            Some(prev) => {
                let fc = tape.mul(f, prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c_new)?;
        h = Some(tape.mul(o, tc)?);
        c = Some(c_new);
    }
    let h_last = h.expect("at least one frame");
    let proj = tape.matmul(h_last, w_out)?;
    let proj = tape.add_row(proj, b_out)?;
    tape.l2_normalize(proj)
}
