//! Central finite-difference verification of tape gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::data::embed::l2_normalize;
use crate::error::{Error, Result};
use crate::heads::{init_params, HeadSpec};
use crate::tensor::Tensor;
use crate::train::DEFAULT_TEMPERATURE;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(1, |a| + |b|)`
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / (autodiff.abs() + numeric.abs()).max(1.0)
}

fn eval_scalar<F>(f: &F, params: &[(String, Tensor<f64>)]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(_, t)| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every element of every parameter.
///
/// `f` receives the tape and one [`Var`] per entry of `params`, in order.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(_, t)| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        let mut worst = 0.0f64;
        for e in 0..analytic.len() {
            let orig = work[pi].1.data()[e];
            work[pi].1.data_mut()[e] = orig + step;
            let plus = eval_scalar(&f, &work)?;
            work[pi].1.data_mut()[e] = orig - step;
            let minus = eval_scalar(&f, &work)?;
            work[pi].1.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[e], numeric));
        }
        report.push(ParamCheck {
            name: params[pi].0.clone(),
            elements: analytic.len(),
            max_rel_error: worst,
            passed: worst < tol,
        });
    }
    Ok(GradCheckReport { step, tol, params: report })
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        data.extend(l2_normalize(&raw)?);
    }
    Tensor::matrix(rows, cols, data)
}

/// Number of random prototypes the head check classifies against.
const CHECK_CLASSES: usize = 3;

/// Checks every parameter of a trainable head through the training loss
/// `CE(τ·⟨fuse(x), P⟩, 0)` on random unit frames (`steps × d_in`) and
/// random unit prototypes, all drawn from `seed`.
pub fn check_head(spec: &HeadSpec, steps: usize, seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    if !spec.kind.is_trainable() {
        return Err(Error::HeadNotTrainable(spec.kind.name().into()));
    }
    let params = init_params(spec, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let frames = unit_rows(&mut rng, steps, spec.d_in)?;
    let protos_t = unit_rows(&mut rng, CHECK_CLASSES, spec.d_out)?.transposed()?;
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| {
        let x = tape.constant(frames.clone())?;
        let p = tape.constant(protos_t.clone())?;
        let emb = params.forward(tape, x, vars)?;
        let z = tape.matmul(emb, p)?;
        let z = tape.scale(z, DEFAULT_TEMPERATURE)?;
        tape.softmax_cross_entropy(z, 0)
    };
    grad_check(loss, &params.named(), step, tol)
}
