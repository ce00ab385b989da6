//! Finite-difference validation of every tape primitive.
//!
//! The oracle here is deliberately independent of `gradcheck`: it rebuilds
//! the forward pass from scratch around a central difference and compares
//! against one backward sweep, entry by entry.

use coveforge_core::tape::{NodeId, ReduceKind, Tape};
use coveforge_core::tensor::Tensor;
use coveforge_core::Result;
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Fixed mixing weights so every output entry contributes to the scalar
/// loss with a distinct sign/magnitude.
fn weighted_loss(tape: &mut Tape<f64>, out: NodeId) -> NodeId {
    let n = tape.value(out).numel();
    let shape = tape.value(out).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.1 + 0.25 * ((i % 7) as f64 - 3.0)).collect();
    let wt = if shape.is_empty() {
        tape.constant(Tensor::scalar(w[0]))
    } else {
        tape.constant(Tensor::new(shape, w).unwrap())
    };
    let prod = tape.mul(out, wt).unwrap();
    tape.sum_all(prod).unwrap()
}

fn eval(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &ids).unwrap();
    let loss = weighted_loss(&mut tape, out);
    tape.value(loss).scalar_value().unwrap()
}

/// Autodiff vs central differences on every entry of every input.
fn check_op(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids).unwrap();
    let loss = weighted_loss(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]);
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= EPS;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * EPS);
            let a = analytic.map(|g| g.data()[e]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            assert!(
                rel <= TOL,
                "input {i} entry {e}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0..2.0f64, n)
}

/// Values bounded away from a kink or pole at zero.
fn values_away_from_zero(n: usize, min_abs: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((min_abs..2.0f64).prop_flat_map(|v| prop_oneof![Just(v), Just(-v)]), n)
}

fn mask(n: usize) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(any::<bool>(), n).prop_filter("needs one valid", |m| {
        m.iter().any(|&b| b)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grad_matmul(m in 1usize..4, k in 1usize..4, n in 1usize..4, seedv in values(48)) {
        let a = tensor(vec![m, k], seedv[..m * k].to_vec());
        let b = tensor(vec![k, n], seedv[16..16 + k * n].to_vec());
        check_op(&[a, b], &|t, ids| t.matmul(ids[0], ids[1]));
    }

    #[test]
    fn grad_matvec_and_transpose(m in 1usize..4, k in 1usize..4, seedv in values(32)) {
        let a = tensor(vec![m, k], seedv[..m * k].to_vec());
        let x = tensor(vec![k], seedv[16..16 + k].to_vec());
        check_op(&[a, x], &|t, ids| {
            let at = t.transpose(ids[0])?;
            let att = t.transpose(at)?;
            t.matvec(att, ids[1])
        });
    }

    #[test]
    fn grad_add_sub_broadcast(rows in 1usize..4, cols in 1usize..4, seedv in values(32)) {
        let a = tensor(vec![rows, cols], seedv[..rows * cols].to_vec());
        let b = tensor(vec![cols], seedv[16..16 + cols].to_vec());
        check_op(&[a.clone(), b.clone()], &|t, ids| t.add(ids[0], ids[1]));
        check_op(&[a, b], &|t, ids| t.sub(ids[0], ids[1]));
    }

    #[test]
    fn grad_mul_div_broadcast(rows in 1usize..4, cols in 1usize..4,
                              av in values(16), bv in values_away_from_zero(4, 0.5)) {
        let a = tensor(vec![rows, cols], av[..rows * cols].to_vec());
        let b = tensor(vec![cols], bv[..cols].to_vec());
        check_op(&[a.clone(), b.clone()], &|t, ids| t.mul(ids[0], ids[1]));
        check_op(&[a, b], &|t, ids| t.div(ids[0], ids[1]));
    }

    #[test]
    fn grad_scalar_chain(n in 1usize..6, v in values(8)) {
        let x = tensor(vec![n], v[..n].to_vec());
        check_op(&[x], &|t, ids| {
            let a = t.neg(ids[0])?;
            let b = t.scale(a, -1.7)?;
            t.add_scalar(b, 0.3)
        });
    }

    #[test]
    fn grad_tanh_sigmoid(n in 1usize..6, v in values(8)) {
        let x = tensor(vec![n], v[..n].to_vec());
        check_op(&[x.clone()], &|t, ids| t.tanh(ids[0]));
        check_op(&[x], &|t, ids| t.sigmoid(ids[0]));
    }

    #[test]
    fn grad_relu_off_kink(n in 1usize..6, v in values_away_from_zero(8, 1e-2)) {
        let x = tensor(vec![n], v[..n].to_vec());
        check_op(&[x], &|t, ids| t.relu(ids[0]));
    }

    #[test]
    fn grad_sqrt(n in 1usize..6, v in proptest::collection::vec(0.2..3.0f64, 8)) {
        let x = tensor(vec![n], v[..n].to_vec());
        check_op(&[x], &|t, ids| t.sqrt(ids[0]));
    }

    #[test]
    fn grad_max_elem_off_ties(n in 1usize..6, v in values(16)) {
        let a: Vec<f64> = v[..n].to_vec();
        // keep operands separated so FD never crosses the switching point
        let b: Vec<f64> = v[8..8 + n].iter().zip(&a)
            .map(|(&bv, &av)| if (bv - av).abs() < 1e-2 { av + 0.5 } else { bv })
            .collect();
        check_op(&[tensor(vec![n], a), tensor(vec![n], b)],
                 &|t, ids| t.max_elem(ids[0], ids[1]));
    }

    #[test]
    fn grad_masked_softmax(rows in 1usize..4, cols in 2usize..5,
                           v in values(20), m in mask(5)) {
        let x = tensor(vec![rows, cols], v[..rows * cols].to_vec());
        let valid = m[..cols].to_vec();
        prop_assume!(valid.iter().any(|&b| b));
        check_op(&[x], &|t, ids| t.masked_softmax_rows(ids[0], &valid));
    }

    #[test]
    fn grad_cross_entropy(rows in 1usize..4, vocab in 2usize..6,
                          v in values(24), m in mask(4), tgt in proptest::collection::vec(0usize..6, 4)) {
        let x = tensor(vec![rows, vocab], v[..rows * vocab].to_vec());
        let valid = m[..rows].to_vec();
        prop_assume!(valid.iter().any(|&b| b));
        let targets: Vec<usize> = tgt[..rows].iter().map(|&t| t % vocab).collect();
        check_op(&[x], &|t, ids| t.cross_entropy_sum(ids[0], &targets, &valid));
    }

    #[test]
    fn grad_masked_reduce(t_len in 1usize..5, d in 1usize..4,
                          v in values(20), m in mask(5)) {
        let x = tensor(vec![t_len, d], v[..t_len * d].to_vec());
        let msk = m[..t_len].to_vec();
        prop_assume!(msk.iter().any(|&b| b));
        for kind in [ReduceKind::Max, ReduceKind::Mean, ReduceKind::Min] {
            check_op(&[x.clone()], &|t, ids| t.masked_reduce(ids[0], &msk, kind));
        }
    }

    #[test]
    fn grad_concat_slice_row_stack(rows in 2usize..4, cols in 1usize..4, v in values(32)) {
        let a = tensor(vec![rows, cols], v[..rows * cols].to_vec());
        let b = tensor(vec![rows, cols], v[16..16 + rows * cols].to_vec());
        check_op(&[a.clone(), b.clone()], &|t, ids| t.concat(&[ids[0], ids[1]], 1));
        check_op(&[a.clone(), b.clone()], &|t, ids| t.concat(&[ids[0], ids[1]], 0));
        check_op(&[a.clone()], &|t, ids| t.slice(ids[0], 0, 0, rows - 1));
        check_op(&[a.clone()], &|t, ids| {
            let r0 = t.row(ids[0], 0)?;
            let r1 = t.row(ids[0], rows - 1)?;
            t.stack_rows(&[r0, r1, r0])
        });
    }

    #[test]
    fn grad_gather_rows(vocab in 3usize..6, d in 1usize..4, v in values(24),
                        ids_raw in proptest::collection::vec(0usize..6, 4)) {
        let table = tensor(vec![vocab, d], v[..vocab * d].to_vec());
        let ids: Vec<usize> = ids_raw.iter().map(|&i| i % vocab).collect();
        check_op(&[table], &|t, nids| t.gather_rows(nids[0], &ids, 0));
    }

    #[test]
    fn grad_reductions(n in 2usize..6, v in values(8)) {
        let x = tensor(vec![n], v[..n].to_vec());
        check_op(&[x.clone()], &|t, ids| t.sum_all(ids[0]));
        check_op(&[x], &|t, ids| t.mean_all(ids[0]));
    }

    // ── value-level invariants ──────────────────────────────────────

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in 1usize..4, cols in 1usize..5, v in values(20), c in -3.0..3.0f64
    ) {
        let x = tensor(vec![rows, cols], v[..rows * cols].to_vec());
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let y = tape.softmax_rows(xn).unwrap();
        let shifted = tape.add_scalar(xn, c).unwrap();
        let ys = tape.softmax_rows(shifted).unwrap();
        for r in 0..rows {
            let sum: f64 = tape.value(y).row_slice(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..cols {
                let d = (tape.value(y).at2(r, j) - tape.value(ys).at2(r, j)).abs();
                prop_assert!(d < 1e-6, "shift invariance broken by {d}");
            }
        }
    }

    #[test]
    fn masked_reduce_full_mask_equals_unmasked_oracle(
        t_len in 1usize..5, d in 1usize..4, v in values(20)
    ) {
        let x = tensor(vec![t_len, d], v[..t_len * d].to_vec());
        let full = vec![true; t_len];
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        for kind in [ReduceKind::Max, ReduceKind::Mean, ReduceKind::Min] {
            let r = tape.masked_reduce(xn, &full, kind).unwrap();
            for j in 0..d {
                // plain unmasked loops as the oracle
                let col: Vec<f64> = (0..t_len).map(|t| x.at2(t, j)).collect();
                let want = match kind {
                    ReduceKind::Max => col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    ReduceKind::Min => col.iter().cloned().fold(f64::INFINITY, f64::min),
                    ReduceKind::Mean => col.iter().sum::<f64>() / t_len as f64,
                };
                prop_assert_eq!(tape.value(r).at1(j), want);
            }
        }
    }
}
