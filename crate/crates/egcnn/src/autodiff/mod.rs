//! Tape-based reverse-mode differentiation engine.
//!
//! The engine is deliberately minimal: dense 64-bit tensors, a fixed op set
//! covering the encoder and objective, an AdaGrad optimizer, and a
//! finite-difference gradient checker used as the correctness oracle for
//! everything differentiable in this crate.

mod gradcheck;
mod optim;
mod param;
mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::adagrad_step;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid_scalar, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use crate::tensor::Tensor;
    use crate::util::{seeded_rng, uniform};

    /// Runs backward once, then verifies every parameter coordinate against
    /// central differences of the rebuilt loss.
    fn fd_check<F>(store: &mut ParamStore, build: F) -> GradCheckReport
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store).unwrap();
        store.clear_grads();
        tape.backward(loss, store).unwrap();
        grad_check(store, GradCheckConfig::default(), |s| {
            let mut t = Tape::new();
            let l = build(&mut t, s)?;
            Ok((t.value(l).item(), t.signature()))
        })
        .unwrap()
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed, 77);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn embedding_lookup_selects_rows() {
        let mut store = ParamStore::new();
        let table = store.add(
            "t",
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let t = tape.param(&store, table).unwrap();
        let out = tape.embedding_lookup(t, &[1, 0, 1]).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn embedding_lookup_rejects_out_of_range() {
        let mut store = ParamStore::new();
        let table = store.add("t", Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let t = tape.param(&store, table).unwrap();
        let err = tape.embedding_lookup(t, &[0, 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("5") && msg.contains("position 1"), "{msg}");
    }

    #[test]
    fn embedding_lookup_single_use_adjoint() {
        // ids=[0], upstream [[1,1]] -> table gradient [[1,1],[0,0]].
        let mut store = ParamStore::new();
        let table = store.add(
            "t",
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let t = tape.param(&store, table).unwrap();
        let row = tape.embedding_lookup(t, &[0]).unwrap();
        let ones = tape
            .constant(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let flat = tape.concat(&[row], &[2]).unwrap();
        let loss = tape.dot(flat, ones).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(table).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_lookup_repeated_ids_accumulate() {
        // ids=[0,0] with upstream rows [1,0] and [2,0]: row 0 grad = [3,0].
        // The sum-of-adjoints rule is cross-checked by finite differences.
        let mut store = ParamStore::new();
        let table = store.add("t", random_tensor(&[3, 2], 1));
        let weights = Tensor::from_vec(&[4], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let build = |tape: &mut Tape, s: &ParamStore| {
            let t = tape.param(s, table)?;
            let rows = tape.embedding_lookup(t, &[0, 0])?;
            let flat = tape.concat(&[rows], &[4])?;
            let w = tape.constant(weights.clone())?;
            tape.dot(flat, w)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(&store.grad(table).data()[0..2], &[3.0, 0.0]);
        let report = fd_check(&mut store, build);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn text_conv_output_shape() {
        let mut store = ParamStore::new();
        let filters = store.add("f", Tensor::zeros(&[3, 16, 128]));
        let bias = store.add("b", Tensor::zeros(&[128]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[100, 16])).unwrap();
        let f = tape.param(&store, filters).unwrap();
        let b = tape.param(&store, bias).unwrap();
        let out = tape.text_conv(x, f, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[98, 128]);
    }

    #[test]
    fn text_conv_zero_input_yields_bias() {
        let mut store = ParamStore::new();
        let filters = store.add("f", random_tensor(&[2, 3, 4], 2));
        let bias = store.add(
            "b",
            Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 3])).unwrap();
        let f = tape.param(&store, filters).unwrap();
        let b = tape.param(&store, bias).unwrap();
        let out = tape.text_conv(x, f, b).unwrap();
        for t in 0..4 {
            assert_eq!(tape.value(out).row(t), &[0.1, -0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn text_conv_hand_evaluated() {
        // 1x1 filter with weight 2, bias 0, input [[3],[5]] -> [[6],[10]].
        let mut store = ParamStore::new();
        let filters = store.add("f", Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap());
        let bias = store.add("b", Tensor::zeros(&[1]));
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[2, 1], vec![3.0, 5.0]).unwrap())
            .unwrap();
        let f = tape.param(&store, filters).unwrap();
        let b = tape.param(&store, bias).unwrap();
        let out = tape.text_conv(x, f, b).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0, 10.0]);
    }

    #[test]
    fn text_conv_shape_error_names_both_shapes() {
        let mut store = ParamStore::new();
        let filters = store.add("f", Tensor::zeros(&[2, 4, 3]));
        let bias = store.add("b", Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 3])).unwrap();
        let f = tape.param(&store, filters).unwrap();
        let b = tape.param(&store, bias).unwrap();
        let msg = tape.text_conv(x, f, b).unwrap_err().to_string();
        assert!(msg.contains("[5, 3]") && msg.contains("[2, 4, 3]"), "{msg}");
    }

    #[test]
    fn text_conv_gradients_match_fd() {
        let mut store = ParamStore::new();
        let filters = store.add("f", random_tensor(&[3, 4, 5], 3));
        let bias = store.add("b", random_tensor(&[5], 4));
        let input = store.add("x", random_tensor(&[7, 4], 5));
        let build = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, input)?;
            let f = tape.param(s, filters)?;
            let b = tape.param(s, bias)?;
            let out = tape.text_conv(x, f, b)?;
            tape.square_sum(out)
        };
        let report = fd_check(&mut store, build);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn max_pool_columnwise() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap())
            .unwrap();
        let out = tape.max_pool_over_time(x).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 5.0]);
    }

    #[test]
    fn max_pool_single_row_is_identity() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let out = tape.max_pool_over_time(x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn max_pool_empty_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(tape.max_pool_over_time(x).is_err());
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        // Tie [[2,0],[2,0]]: all gradient flows to t=0, and the chosen
        // routing is a valid subgradient (one-sided difference agrees).
        let mut store = ParamStore::new();
        let input = store.add("x", Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 2.0, 0.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(&store, input).unwrap();
        let out = tape.max_pool_over_time(x).unwrap();
        let loss = tape.square_sum(out).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(input).data(), &[4.0, 0.0, 0.0, 0.0]);

        // One-sided difference on the winning coordinate.
        let eps = 1e-6;
        let f0 = 2.0f64.powi(2);
        let f1 = (2.0f64 + eps).powi(2);
        let one_sided = (f1 - f0) / eps;
        assert!((one_sided - 4.0).abs() < 1e-4);
    }

    #[test]
    fn max_pool_gradients_match_fd() {
        let mut store = ParamStore::new();
        let input = store.add("x", random_tensor(&[6, 4], 6));
        let build = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, input)?;
            let out = tape.max_pool_over_time(x)?;
            tape.square_sum(out)
        };
        let report = fd_check(&mut store, build);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[3], vec![0.0, -3.0, 0.6]).unwrap())
            .unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let expected = 1.0 / (1.0 + (-0.6f64).exp());
        assert!((tape.value(s).data()[2] - expected).abs() < 1e-9);
        assert!((tape.value(s).data()[2] - 0.6456563062257954).abs() < 1e-9);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data()[1], 0.0);
    }

    #[test]
    fn sigmoid_and_relu_gradients_match_fd() {
        let mut store = ParamStore::new();
        let input = store.add("x", random_tensor(&[9], 7));
        let build = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, input)?;
            let a = tape.sigmoid(x)?;
            let b = tape.relu(a)?;
            tape.square_sum(b)
        };
        let report = fd_check(&mut store, build);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn dense_and_scale_rows_and_concat_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = store.add("b", Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap())
            .unwrap();
        let wv = tape.param(&store, w).unwrap();
        let bv = tape.param(&store, b).unwrap();
        let out = tape.dense(x, wv, bv).unwrap();
        assert_eq!(tape.value(out).data(), &[2.5, 2.5]);

        // scale_rows([[1,2],[3,4]], [0.5,1]) -> [[0.5,1],[3,4]]
        let m = tape
            .constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let g = tape
            .constant(Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap())
            .unwrap();
        let scaled = tape.scale_rows(m, g).unwrap();
        assert_eq!(tape.value(scaled).data(), &[0.5, 1.0, 3.0, 4.0]);

        // concat of four 128-vectors has 512 elements.
        let parts: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::zeros(&[128])).unwrap())
            .collect();
        let cat = tape.concat(&parts, &[512]).unwrap();
        assert_eq!(tape.value(cat).len(), 512);

        // mse at the identity point.
        let p = tape.constant(Tensor::scalar(0.7)).unwrap();
        let e = tape.squared_error(p, 0.7).unwrap();
        assert_eq!(tape.value(e).item(), 0.0);
    }

    #[test]
    fn dense_matvec_scale_rows_gradients_match_fd() {
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&[4, 3], 8));
        let b = store.add("b", random_tensor(&[3], 9));
        let x = store.add("x", random_tensor(&[4], 10));
        let m = store.add("m", random_tensor(&[3, 3], 11));
        let gv = store.add("g", random_tensor(&[1], 12));
        let build = |tape: &mut Tape, s: &ParamStore| {
            let xv = tape.param(s, x)?;
            let wv = tape.param(s, w)?;
            let bv = tape.param(s, b)?;
            let dense_out = tape.dense(xv, wv, bv)?;

            let mv = tape.param(s, m)?;
            let gvv = tape.param(s, gv)?;
            let rows = tape.matvec_bias(mv, dense_out, gvv)?;
            let gates = tape.sigmoid(rows)?;
            let gated = tape.scale_rows(mv, gates)?;
            let pooled = tape.max_pool_over_time(gated)?;
            let joined = tape.hconcat(&[mv, gated])?;
            let r0 = tape.row_slice(joined, 1)?;
            let part = tape.square_sum(r0)?;
            let part2 = tape.square_sum(pooled)?;
            tape.sum(&[part, part2])
        };
        let report = fd_check(&mut store, build);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn backward_of_square_is_double() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(3.0));
        let q = store.add("q", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let pv = tape.param(&store, p).unwrap();
        let loss = tape.square_sum(pv).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).item(), 6.0);
        // q does not appear in the loss: gradient stays zero.
        assert_eq!(store.grad(q).item(), 0.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let pv = tape.param(&store, p).unwrap();
        assert!(tape.backward(pv, &mut store).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2), coordinatewise.
        let mut store = ParamStore::new();
        let p = store.add("p", random_tensor(&[5], 13));
        let grads_of = |store: &mut ParamStore, a: f64, b: f64| -> Vec<f64> {
            store.clear_grads();
            let mut tape = Tape::new();
            let pv = tape.param(store, p).unwrap();
            let l1 = tape.square_sum(pv).unwrap();
            let s = tape.sigmoid(pv).unwrap();
            let l2 = tape.square_sum(s).unwrap();
            let l1s = tape.scale(l1, a).unwrap();
            let l2s = tape.scale(l2, b).unwrap();
            let loss = tape.sum(&[l1s, l2s]).unwrap();
            tape.backward(loss, store).unwrap();
            store.grad(p).data().to_vec()
        };
        let g1 = grads_of(&mut store, 1.0, 0.0);
        let g2 = grads_of(&mut store, 0.0, 1.0);
        let gc = grads_of(&mut store, 2.0, -0.5);
        for i in 0..g1.len() {
            let expect = 2.0 * g1[i] - 0.5 * g2[i];
            assert!((gc[i] - expect).abs() < 1e-12, "coord {i}");
        }
    }

    #[test]
    fn forward_and_gradients_are_bit_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let a = store.add("a", random_tensor(&[4, 3], 21));
            let f = store.add("f", random_tensor(&[2, 3, 2], 22));
            let b = store.add("b", random_tensor(&[2], 23));
            let mut tape = Tape::new();
            let av = tape.param(&store, a).unwrap();
            let fv = tape.param(&store, f).unwrap();
            let bv = tape.param(&store, b).unwrap();
            let conv = tape.text_conv(av, fv, bv).unwrap();
            let act = tape.relu(conv).unwrap();
            let pooled = tape.max_pool_over_time(act).unwrap();
            let loss = tape.square_sum(pooled).unwrap();
            tape.backward(loss, &mut store).unwrap();
            (
                tape.value(loss).item().to_bits(),
                store
                    .grad(a)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let mut store = ParamStore::new();
        let p = store.add("p", random_tensor(&[6], 31));
        let build = |tape: &mut Tape, s: &ParamStore| {
            let pv = tape.param(s, p)?;
            tape.square_sum(pv)
        };
        let report = fd_check(&mut store, build);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn grad_check_excludes_relu_kink_at_zero() {
        // One coordinate sits exactly on the relu kink; the signature filter
        // must exclude it rather than report a spurious mismatch.
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(&[3], vec![0.5, 0.0, -0.5]).unwrap());
        let build = |tape: &mut Tape, s: &ParamStore| {
            let pv = tape.param(s, p)?;
            let r = tape.relu(pv)?;
            tape.square_sum(r)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let report = grad_check(&mut store, GradCheckConfig::default(), |s| {
            let mut t = Tape::new();
            let l = build(&mut t, s)?;
            Ok((t.value(l).item(), t.signature()))
        })
        .unwrap();
        assert_eq!(report.skipped, 1, "{report:?}");
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn finite_check_traps_overflow() {
        let mut tape = Tape::new().with_finite_check(true);
        let huge = tape
            .constant(Tensor::from_vec(&[2], vec![1e308, 1e308]).unwrap())
            .unwrap();
        let sq = tape.square_sum(huge);
        assert!(sq.is_err());
    }
}
