//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operators the encoder, heads and losses need are provided.
//! Elementwise operators require identical shapes; there is no broadcasting.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_many, finite_difference_check_with_fault,
    relative_error, GradCheckReport, GRAD_MAGNITUDE_FLOOR,
};
pub use tape::{GruInputs, OpKind, Tape, Var, SQRT_GRAD_FLOOR};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("empty sequence: {0}")]
    EmptySequence(String),
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.param(Tensor::vector(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[0.0]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn concat_preserves_argument_order() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 2.0]);
        let b = vec_var(&mut tape, &[3.0]);
        let c = tape.concat_last_axis(&[a, b]).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn squared_distance_of_identical_vectors_is_zero() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 2.0]);
        let b = vec_var(&mut tape, &[1.0, 2.0]);
        let d = tape.squared_euclidean_distance(a, b).unwrap();
        assert_eq!(tape.value(d).item(), 0.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_distance_gradient() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[3.0]);
        let y = vec_var(&mut tape, &[1.0]);
        let d = tape.squared_euclidean_distance(x, y).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert_eq!(tape.grad(y).unwrap(), &[-4.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 2.0]);
        let b = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
        assert!(matches!(tape.add(a, b), Err(AdError::ShapeMismatch(_))));
        assert!(matches!(tape.mul(a, b), Err(AdError::ShapeMismatch(_))));
        assert!(matches!(tape.squared_euclidean_distance(a, b), Err(AdError::ShapeMismatch(_))));
        let m = tape.param(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        assert!(matches!(tape.matmul(m, a), Err(AdError::ShapeMismatch(_))));
        assert!(tape.matmul(m, b).is_ok());
        let n = tape.param(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        assert!(tape.concat_last_axis(&[m, n]).is_ok());
        assert!(matches!(tape.concat_last_axis(&[m, a]), Err(AdError::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut tape = Tape::new();
        let bad = Tensor::vector(vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(tape.leaf(bad), Err(AdError::NonFinite(_))));
        let inf = Tensor::vector(vec![f64::INFINITY]).unwrap();
        assert!(matches!(tape.constant(inf), Err(AdError::NonFinite(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.backward(y), Err(AdError::NotScalar(vec![2])));
    }

    #[test]
    fn gradients_accumulate_across_fan_out() {
        // x feeds both tanh(x) and x * x
        let x0 = [0.3, -1.2];
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &x0);
        let t = tape.tanh(x).unwrap();
        let q = tape.mul(x, x).unwrap();
        let s = tape.add(t, q).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        let both = tape.grad(x).unwrap().to_vec();

        let single = |use_tanh: bool| {
            let mut tape = Tape::new();
            let x = vec_var(&mut tape, &x0);
            let y = if use_tanh { tape.tanh(x).unwrap() } else { tape.mul(x, x).unwrap() };
            let loss = tape.sum(y).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (g1, g2) = (single(true), single(false));
        for i in 0..2 {
            assert!((both[i] - (g1[i] + g2[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0]);
        let c = tape.constant(Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn sqrt_gradient_is_finite_at_zero() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[0.5, -0.25]);
        let b = vec_var(&mut tape, &[0.5, -0.25]);
        let d2 = tape.squared_euclidean_distance(a, b).unwrap();
        let d = tape.sqrt(d2).unwrap();
        assert_eq!(tape.value(d).item(), 0.0);
        tape.backward(d).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|g| g.is_finite()));
        assert!(tape.grad(d2).unwrap()[0].is_finite());
    }

    #[test]
    fn sum_of_squares_checks_exactly() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relu_checks_away_from_kink() {
        let x = Tensor::vector(vec![0.5]).unwrap();
        let report = finite_difference_check(
            |tape, x| {
                let y = tape.relu(x)?;
                tape.sum(y)
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn matmul_shapes() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let v = vec_var(&mut tape, &[1.0, 0.0, -1.0]);
        let mv = tape.matmul(m, v).unwrap();
        assert_eq!(tape.value(mv).shape(), &[2]);
        assert_eq!(tape.value(mv).values(), &[-2.0, -2.0]);
        let u = vec_var(&mut tape, &[1.0, 1.0]);
        let um = tape.matmul(u, m).unwrap();
        assert_eq!(tape.value(um).values(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn mean_over_axes() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::matrix(2, 2, vec![1., 3., 3., 5.]).unwrap()).unwrap();
        let rows = tape.mean_over_axis(m, 0).unwrap();
        assert_eq!(tape.value(rows).values(), &[2.0, 4.0]);
        let cols = tape.mean_over_axis(m, 1).unwrap();
        assert_eq!(tape.value(cols).values(), &[2.0, 4.0]);
        assert!(tape.mean_over_axis(m, 2).is_err());
    }

    #[test]
    fn injected_fault_negates_rule() {
        let mut tape = Tape::new();
        tape.inject_fault(OpKind::Tanh);
        let x = vec_var(&mut tape, &[0.4]);
        let y = tape.tanh(x).unwrap();
        tape.backward(y).unwrap();
        let expected = 1.0 - 0.4f64.tanh().powi(2);
        assert_eq!(tape.grad(x).unwrap()[0], -expected);
    }
}
