use proptest::prelude::*;
use videmb::autodiff::{softmax_cross_entropy, Tape, Var};
use videmb::gradcheck::{check_head, grad_check, DEFAULT_STEP, DEFAULT_TOL};
use videmb::heads::{HeadKind, HeadSpec, Pooling};
use videmb::optim::{adam_step, AdamConfig, AdamState};
use videmb::tensor::matmul;
use videmb::{Real, Result, Tensor};

fn assert_passes(spec: &HeadSpec, seed: u64) {
    let report = check_head(spec, 4, seed, DEFAULT_STEP, DEFAULT_TOL).unwrap();
    assert_eq!(report.params.len(), spec.param_layout().len());
    for p in &report.params {
        assert!(p.passed, "{} max rel error {:e}", p.name, p.max_rel_error);
    }
}

#[test]
fn lstm_head_gradients() {
    assert_passes(&HeadSpec::new(HeadKind::Lstm, 6), 11);
    assert_passes(&HeadSpec { hidden: 4, d_out: 5, ..HeadSpec::new(HeadKind::Lstm, 6) }, 3);
}

#[test]
fn transformer_head_gradients() {
    let base = HeadSpec { layers: 1, heads: 2, ..HeadSpec::new(HeadKind::Transformer, 6) };
    assert_passes(&base, 11);
    assert_passes(&HeadSpec { pooling: Pooling::Mean, d_model: 4, ffn_dim: 8, ..base.clone() }, 5);
    assert_passes(&HeadSpec { layers: 2, ..base }, 9);
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662 + seed as f64 * 0.5698402910).fract() * 2.0 - 1.0);
    Tensor::new(shape.to_vec(), data.collect()).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    L2,
    Transpose,
    MeanRows,
    Scale,
}

const UNARY: [Unary; 8] = [
    Unary::Sigmoid,
    Unary::Tanh,
    Unary::Relu,
    Unary::Softmax,
    Unary::L2,
    Unary::Transpose,
    Unary::MeanRows,
    Unary::Scale,
];

fn apply<R: Real>(op: Unary, tape: &mut Tape<R>, x: Var) -> Result<Var> {
    match op {
        Unary::Sigmoid => tape.sigmoid(x),
        Unary::Tanh => tape.tanh(x),
        Unary::Relu => tape.relu(x),
        Unary::Softmax => tape.softmax_rows(x),
        Unary::L2 => tape.l2_normalize(x),
        Unary::Transpose => tape.transpose(x),
        Unary::MeanRows => tape.mean_rows(x),
        Unary::Scale => tape.scale(x, R::from_f64_lossy(-1.7)),
    }
}

/// `Σ op(x) ∘ w` with a fixed random weighting, so every output element
/// contributes a distinct amount to the scalar.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(tape.value(y).shape(), seed + 100))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unary_ops_match_finite_differences(op in 0..UNARY.len(), r in 1usize..4, c in 1usize..5, seed in 0u64..1000) {
        let op = UNARY[op];
        let x = random_tensor(&[r, c], seed);
        // Keep ReLU inputs away from the kink.
        let x = match op {
            Unary::Relu => Tensor::new(vec![r, c], x.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect()).unwrap(),
            _ => x,
        };
        let report = grad_check(
            |tape, v| {
                let y = apply(op, tape, v[0])?;
                weighted_sum(tape, y, seed)
            },
            &[("x".into(), x)],
            DEFAULT_STEP,
            DEFAULT_TOL,
        ).unwrap();
        prop_assert!(report.passed(), "{:?}: {:e}", op, report.max_rel_error());
    }

    #[test]
    fn binary_ops_match_finite_differences(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let params = vec![
            ("a".to_string(), random_tensor(&[m, k], seed)),
            ("b".to_string(), random_tensor(&[k, n], seed + 1)),
            ("c".to_string(), random_tensor(&[m, n], seed + 2)),
            ("row".to_string(), random_tensor(&[n], seed + 3)),
            ("g".to_string(), random_tensor(&[n], seed + 4)),
        ];
        let report = grad_check(
            |tape, v| {
                let ab = tape.matmul(v[0], v[1])?;
                let s = tape.sub(ab, v[2])?;
                let prod = tape.mul(s, v[2])?;
                let y = tape.add_row(prod, v[3])?;
                let both = tape.concat_cols(&[y, s])?;
                let stacked = tape.concat_rows(&[both, both])?;
                let part = tape.slice_cols(stacked, 0, n)?;
                let part = tape.slice_rows(part, m, m)?;
                let ln = if n > 1 { tape.layer_norm_rows(part, v[4], v[3])? } else { part };
                let flat = tape.reshape(ln, vec![m * n])?;
                weighted_sum(tape, flat, seed)
            },
            &params,
            DEFAULT_STEP,
            DEFAULT_TOL,
        ).unwrap();
        prop_assert!(report.passed(), "{:?}", report.params);
    }

    #[test]
    fn cross_entropy_matches_finite_differences(c in 2usize..8, target_seed in 0usize..100, seed in 0u64..1000) {
        let target = target_seed % c;
        let report = grad_check(
            |tape, v| {
                let z = tape.scale(v[0], 3.0)?;
                tape.softmax_cross_entropy(z, target)
            },
            &[("z".into(), random_tensor(&[c], seed))],
            DEFAULT_STEP,
            DEFAULT_TOL,
        ).unwrap();
        prop_assert!(report.passed());
    }

    #[test]
    fn matmul_is_associative(m in 1usize..5, k in 1usize..5, l in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let a = random_tensor(&[m, k], seed);
        let b = random_tensor(&[k, l], seed + 1);
        let c = random_tensor(&[l, n], seed + 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-12) || (x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(z in proptest::collection::vec(-50.0f64..50.0, 2..30), t in 0usize..30) {
        let t = t % z.len();
        let (loss, grad) = softmax_cross_entropy(&Tensor::vector(z).unwrap(), t).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(grad.data().iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_is_ln_c_only_when_uniform(c in 2usize..30, v in -5.0f64..5.0, bump in 1e-3f64..2.0) {
        let (uniform, _) = softmax_cross_entropy(&Tensor::vector(vec![v; c]).unwrap(), 0).unwrap();
        prop_assert!((uniform - (c as f64).ln()).abs() < 1e-12);
        let mut z = vec![v; c];
        z[c - 1] += bump;
        let (skewed, _) = softmax_cross_entropy(&Tensor::vector(z).unwrap(), 0).unwrap();
        prop_assert!((skewed - (c as f64).ln()).abs() > 1e-9);
    }

    #[test]
    fn zero_gradient_adam_step_is_identity(vals in proptest::collection::vec(-10.0f32..10.0, 1..20)) {
        let mut p = Tensor::vector(vals.clone()).unwrap();
        let mut state = AdamState::for_param(&p);
        adam_step(&mut p, &vec![0.0; vals.len()], &mut state, &AdamConfig::default()).unwrap();
        prop_assert_eq!(p.data(), &vals[..]);
    }

    /// Random finite inputs through every op: either a finite result or a
    /// typed error, never a NaN or infinity.
    #[test]
    fn ops_never_emit_non_finite(vals in proptest::collection::vec(prop_oneof![-1e30f32..1e30, -10.0f32..10.0, Just(0.0f32)], 6), op in 0..UNARY.len(), other in 0usize..4) {
        let x = Tensor::matrix(2, 3, vals).unwrap();
        let mut tape = Tape::<f32>::new();
        let Ok(v) = tape.param(x) else { return Ok(()) };
        let ops: Vec<Result<Var>> = vec![
            apply(UNARY[op], &mut tape, v),
            match other {
                0 => tape.mul(v, v),
                1 => tape.add(v, v),
                2 => {
                    let t = tape.transpose(v).expect("transpose of a matrix");
                    tape.matmul(v, t)
                }
                _ => tape.sum(v),
            },
        ];
        for r in ops.into_iter().flatten() {
            prop_assert!(tape.value(r).all_finite());
            if tape.value(r).len() == 1 {
                if let Ok(g) = tape.backward(r) {
                    prop_assert!(g.get_or_zeros(v).iter().all(|x| x.is_finite()));
                }
                break;
            }
        }
    }
}
