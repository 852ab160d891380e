//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use params::{Binding, ParamId, ParamSet};
pub use tape::{matmul_dense, Grads, Tape, TensorId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tensor2(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let mut tape = Tape::new();
        let eye = tape.constant(tensor2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(tensor2(2, 2, &[3.0, -1.0, 0.5, 7.0]));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_row_times_ones_sums() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor2(1, 3, &[1.0, 2.0, 3.0]));
        let ones = tape.constant(tensor2(3, 1, &[1.0, 1.0, 1.0]));
        let out = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor2(2, 3, &[0.0; 6]));
        let b = tape.constant(tensor2(2, 2, &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = rng::stream(11, &[1]);
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let b = ps.add("b", Tensor::randn(vec![4, 2], 1.0, &mut rng));
        let err = grad_check(&ps, 1e-5, |tape, bd| {
            let prod = tape.matmul(bd.id(a), bd.id(b))?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(err < 1e-6, "matmul grad err {err}");
    }

    #[test]
    fn softmax_uniform_for_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 3, &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 4, &[0.3, -1.0, 2.5, 0.0]));
        let xc = tape.constant(tensor2(1, 4, &[0.3 + 7.0, -1.0 + 7.0, 2.5 + 7.0, 7.0]));
        let y1 = tape.softmax(x, 1).unwrap();
        let y2 = tape.softmax(xc, 1).unwrap();
        for (a, b) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_case() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 2, &[2.0f64.ln(), 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rng::stream(3, &[2]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![5, 7], 3.0, &mut rng));
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..5 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(tape.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_raw(vec![1, 2], vec![f64::NAN, 0.0]));
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn rms_norm_all_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 2, &[5.0, 5.0]));
        let gamma = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.rms_norm(x, gamma, 0.0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_zero_vector_with_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 3, &[0.0, 0.0, 0.0]));
        let gamma = tape.constant(Tensor::from_vec(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.rms_norm(x, gamma, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rms_norm_hand_evaluated() {
        // x=[3,4]: mean square 12.5, so y = x / sqrt(12.5)
        let mut tape = Tape::new();
        let x = tape.constant(tensor2(1, 2, &[3.0, 4.0]));
        let gamma = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.rms_norm(x, gamma, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((tape.value(y).data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 4.0 / r).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_gradient() {
        let mut rng = rng::stream(5, &[3]);
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::randn(vec![3, 6], 1.0, &mut rng));
        let g = ps.add("gamma", Tensor::randn(vec![6], 0.5, &mut rng));
        let err = grad_check(&ps, 1e-5, |tape, b| {
            let y = tape.rms_norm(b.id(x), b.id(g), 1e-6)?;
            let sq = tape.mul(y, y)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-6, "rms_norm grad err {err}");
    }

    #[test]
    fn softmax_cross_entropy_composite_gradient() {
        // d(CE)/d(logits) for a single row is softmax(logits) - onehot.
        let mut ps = ParamSet::new();
        let logits = ps.add("logits", tensor2(1, 4, &[0.2, -0.7, 1.1, 0.0]));
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let loss = tape.cross_entropy(b.id(logits), &[2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(b.id(logits)).unwrap();

        let mut t2 = Tape::new();
        let l2 = t2.constant(ps.get(logits).clone());
        let p = t2.softmax(l2, 1).unwrap();
        for j in 0..4 {
            let expect = t2.value(p).data()[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.data()[j] - expect).abs() < 1e-12);
        }

        let err = grad_check(&ps, 1e-6, |tape, b| tape.cross_entropy(b.id(logits), &[2])).unwrap();
        assert!(err < 1e-7, "cross_entropy grad err {err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = rng::stream(17, &[4]);
            let mut ps = ParamSet::new();
            let w = ps.add("w", Tensor::randn(vec![4, 4], 1.0, &mut rng));
            let x = ps.add("x", Tensor::randn(vec![2, 4], 1.0, &mut rng));
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape);
            let h = tape.matmul(b.id(x), b.id(w)).unwrap();
            let s = tape.silu(h).unwrap();
            let sm = tape.softmax(s, 1).unwrap();
            let loss = tape.mean(sm).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(b.id(w)).unwrap().data().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn concat_narrow_transpose_reshape_gradients() {
        let mut rng = rng::stream(23, &[5]);
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::randn(vec![2, 3], 1.0, &mut rng));
        let b = ps.add("b", Tensor::randn(vec![2, 2], 1.0, &mut rng));
        let err = grad_check(&ps, 1e-5, |tape, bd| {
            let cat = tape.concat(&[bd.id(a), bd.id(b)], 1)?; // [2,5]
            let t = tape.transpose(cat)?; // [5,2]
            let cut = tape.narrow(t, 0, 1, 3)?; // [3,2]
            let r = tape.reshape(cut, vec![2, 3])?;
            let sq = tape.mul(r, r)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-6, "concat/narrow/transpose/reshape grad err {err}");
    }

    #[test]
    fn gather_scatters_gradient_to_rows() {
        let mut ps = ParamSet::new();
        let table = ps.add("t", tensor2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        // row 1 twice, row 0 once; row 2 untouched
        let out = tape.gather(b.id(table), &[1, 1, 0]).unwrap();
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(b.id(table)).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.constant(tensor2(2, 2, &[0.0; 4]));
        assert!(tape.gather(t, &[2]).is_err());
    }

    #[test]
    fn silu_and_elementwise_gradients() {
        let mut rng = rng::stream(29, &[6]);
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::randn(vec![2, 5], 1.0, &mut rng));
        let b = ps.add("b", Tensor::randn(vec![2, 5], 1.0, &mut rng));
        let err = grad_check(&ps, 1e-5, |tape, bd| {
            let s = tape.silu(bd.id(a))?;
            let m = tape.mul(s, bd.id(b))?;
            let d = tape.sub(m, bd.id(a))?;
            let sc = tape.scale(d, 0.7)?;
            let e = tape.add(sc, bd.id(b))?;
            tape.mse(e, bd.id(a))
        })
        .unwrap();
        assert!(err < 1e-6, "elementwise chain grad err {err}");
    }

    #[test]
    fn swiglu_zero_input_gives_zero() {
        let mut rng = rng::stream(37, &[8]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let w1 = tape.constant(Tensor::randn(vec![3, 5], 1.0, &mut rng));
        let w3 = tape.constant(Tensor::randn(vec![3, 5], 1.0, &mut rng));
        let w2 = tape.constant(Tensor::randn(vec![5, 3], 1.0, &mut rng));
        let y = tape.swiglu(x, w1, w3, w2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_scalar_case() {
        // w1 = w3 = w2 = 1, x = 1: SiLU(1)·1·1 = 1/(1+e⁻¹)
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::filled(vec![1, 1], 1.0));
        let y = tape.swiglu(one, one, one, one).unwrap();
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.value(y).item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn swiglu_gradient() {
        let mut rng = rng::stream(41, &[9]);
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::randn(vec![2, 4], 1.0, &mut rng));
        let w1 = ps.add("w1", Tensor::randn(vec![4, 6], 0.5, &mut rng));
        let w3 = ps.add("w3", Tensor::randn(vec![4, 6], 0.5, &mut rng));
        let w2 = ps.add("w2", Tensor::randn(vec![6, 4], 0.5, &mut rng));
        let err = grad_check(&ps, 1e-5, |tape, b| {
            let y = tape.swiglu(b.id(x), b.id(w1), b.id(w3), b.id(w2))?;
            let sq = tape.mul(y, y)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-6, "swiglu grad err {err}");
    }

    #[test]
    fn softmax_gradient_any_axis() {
        let mut rng = rng::stream(31, &[7]);
        for axis in [0usize, 1] {
            let mut ps = ParamSet::new();
            let x = ps.add("x", Tensor::randn(vec![3, 4], 1.0, &mut rng));
            let w = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let err = grad_check(&ps, 1e-5, move |tape, b| {
                let y = tape.softmax(b.id(x), axis)?;
                let wc = tape.constant(w.clone());
                let m = tape.mul(y, wc)?;
                tape.sum(m)
            })
            .unwrap();
            assert!(err < 1e-6, "softmax axis {axis} grad err {err}");
        }
    }
}
