//! Finite-difference gradient verification.
//!
//! Central differences over every trainable coordinate, compared against
//! the tape's reverse-mode gradients. The worst relative error comes back
//! to the caller; callers assert against their own tolerance.

use crate::autodiff::params::{Binding, ParamSet};
use crate::autodiff::tape::{Tape, TensorId};
use crate::error::{D2cError, Result};

/// Relative-error floor: coordinates whose analytic and numeric gradients
/// are both below this magnitude are treated as matching (central
/// differences carry ~1e-11 absolute noise at step 1e-5).
const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Binding) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let loss = f(&mut tape, &binding)?;
    tape.value(loss).item()
}

/// Compare reverse-mode gradients of `f` against central differences on
/// every trainable coordinate of `params`. Returns the worst relative
/// error. `f` must be deterministic; two differing evaluations at the
/// base point are reported as an unreliable oracle.
pub fn grad_check<F>(params: &ParamSet, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Binding) -> Result<TensorId>,
{
    if step <= 0.0 {
        return Err(D2cError::config("grad_check step must be > 0"));
    }

    let v1 = eval_scalar(params, &f)?;
    let v2 = eval_scalar(params, &f)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(D2cError::UnreliableOracle(format!(
            "two evaluations differ: {v1} vs {v2}"
        )));
    }

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let loss = f(&mut tape, &binding)?;
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        if !params.get(id).requires_grad() {
            continue;
        }
        let analytic = grads.get_or_zeros(binding.id(id), params.get(id).shape());
        for c in 0..params.get(id).numel() {
            let orig = params.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + step;
            let lp = eval_scalar(&work, &f)?;
            work.get_mut(id).data_mut()[c] = orig - step;
            let lm = eval_scalar(&work, &f)?;
            work.get_mut(id).data_mut()[c] = orig;
            let fd = (lp - lm) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[c], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Tensor;
    use crate::rng;

    #[test]
    fn linear_function_is_exact() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::from_vec(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let err = grad_check(&ps, 1e-5, |tape, b| {
            let w = tape.constant(Tensor::from_vec(vec![3], vec![2.0, -0.5, 1.5]).unwrap());
            let prod = tape.mul(b.id(x), w)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(err < 1e-9, "linear grad_check error {err}");
    }

    #[test]
    fn sum_of_squares_matches_2x() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::from_vec(vec![4], vec![0.5, -0.25, 1.0, 2.0]).unwrap());

        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let sq = tape.mul(b.id(x), b.id(x)).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(b.id(x)).unwrap();
        for (gi, xi) in g.data().iter().zip(ps.get(x).data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }

        let err = grad_check(&ps, 1e-5, |tape, b| {
            let sq = tape.mul(b.id(x), b.id(x))?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(1.5));
        let unused = ps.add("unused", Tensor::scalar(9.0));
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let loss = {
            let sq = tape.mul(b.id(x), b.id(x)).unwrap();
            tape.sum(sq).unwrap()
        };
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b.id(unused)).is_none());
        let z = grads.get_or_zeros(b.id(unused), ps.get(unused).shape());
        assert_eq!(z.data(), &[0.0]);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use rand::Rng;
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::scalar(1.0));
        let rng = std::cell::RefCell::new(rng::stream(1, &[99]));
        let res = grad_check(&ps, 1e-5, |tape, _b| {
            let noise: f64 = rng.borrow_mut().gen();
            let t = tape.constant(Tensor::scalar(noise));
            tape.sum(t)
        });
        assert!(matches!(res, Err(D2cError::UnreliableOracle(_))));
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // Fault injection: pretend d(x^2)/dx = 2.1x and check the comparator
        // flags it against central differences.
        let xs = [0.7, -1.3, 2.2];
        let f = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let step = 1e-5;
        let mut worst = 0.0f64;
        for c in 0..xs.len() {
            let mut plus = xs;
            plus[c] += step;
            let mut minus = xs;
            minus[c] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            let wrong = 2.1 * xs[c];
            worst = worst.max(relative_error(wrong, fd));
        }
        assert!(worst > 1e-2, "fault injection went undetected: {worst}");
    }
}
