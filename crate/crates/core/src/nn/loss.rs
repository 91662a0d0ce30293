use crate::autodiff::{AdError, Tape, Tensor, Var};

/// Identity in the forward pass; multiplies the gradient by −1 on the way back.
pub fn grl_apply(tape: &mut Tape, x: Var) -> Result<Var, AdError> {
    tape.gradient_reversal(x)
}

/// Euclidean distance. The backward rule clamps the radicand at
/// [`crate::autodiff::SQRT_GRAD_FLOOR`] so coincident points get a finite gradient.
pub fn euclidean_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var, AdError> {
    let sq = tape.squared_euclidean_distance(a, b)?;
    tape.sqrt(sq)
}

/// `max{1 + D(v_a, v_p) − D(v_a, v_n), 0}` with a fixed unit margin.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, positive: Var, negative: Var) -> Result<Var, AdError> {
    let d_pos = euclidean_distance(tape, anchor, positive)?;
    let d_neg = euclidean_distance(tape, anchor, negative)?;
    let shifted = tape.add_scalar(d_pos, 1.0)?;
    let margin = tape.sub(shifted, d_neg)?;
    tape.relu(margin)
}

pub fn bce_with_logits(tape: &mut Tape, logit: Var, label: f64) -> Result<Var, AdError> {
    tape.bce_with_logits(logit, label)
}

/// `(â − a)²`; the caller averages over the batch.
pub fn mse_loss(tape: &mut Tape, estimate: Var, target: f64) -> Result<Var, AdError> {
    let t = tape.constant(Tensor::scalar(target))?;
    tape.squared_euclidean_distance(estimate, t)
}

/// Mean of scalar losses.
pub fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var, AdError> {
    if losses.is_empty() {
        return Err(AdError::EmptySequence("mean of no losses".into()));
    }
    let stacked = tape.stack(losses)?;
    let total = tape.sum(stacked)?;
    tape.scale(total, 1.0 / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(tape: &mut Tape, x: &[f64]) -> Var {
        tape.param(Tensor::vector(x.to_vec()).unwrap()).unwrap()
    }

    fn s(tape: &mut Tape, x: f64) -> Var {
        tape.param(Tensor::scalar(x)).unwrap()
    }

    #[test]
    fn triplet_hinge_inactive() {
        // D(a,p) = 0.2, D(a,n) = 1.5
        let mut tape = Tape::new();
        let a = v(&mut tape, &[0.0, 0.0]);
        let p = v(&mut tape, &[0.2, 0.0]);
        let n = v(&mut tape, &[0.0, 1.5]);
        let l = triplet_loss(&mut tape, a, p, n).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        for x in [a, p, n] {
            assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn triplet_positive_equals_anchor() {
        let mut tape = Tape::new();
        let a = v(&mut tape, &[1.0, 1.0]);
        let p = v(&mut tape, &[1.0, 1.0]);
        let n = v(&mut tape, &[1.0, 1.5]);
        let l = triplet_loss(&mut tape, a, p, n).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
        tape.backward(l).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn triplet_positive_equals_negative() {
        let mut tape = Tape::new();
        let a = v(&mut tape, &[3.0, -7.0, 0.5]);
        let p = v(&mut tape, &[0.1, 0.2, 0.3]);
        let n = v(&mut tape, &[0.1, 0.2, 0.3]);
        let l = triplet_loss(&mut tape, a, p, n).unwrap();
        // (1 + D) − D rounds, so only equal to 1 up to one ulp of D
        assert!((tape.value(l).item() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn triplet_shape_mismatch() {
        let mut tape = Tape::new();
        let a = v(&mut tape, &[0.0, 0.0]);
        let p = v(&mut tape, &[0.0]);
        assert!(matches!(triplet_loss(&mut tape, a, p, a), Err(AdError::ShapeMismatch(_))));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let z = s(&mut tape, 0.0);
        let l = bce_with_logits(&mut tape, z, 1.0).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let big = s(&mut tape, 50.0);
        let l = bce_with_logits(&mut tape, big, 1.0).unwrap();
        assert!(tape.value(l).item() < 1e-20);

        let neg = s(&mut tape, -3.0);
        let pos = s(&mut tape, 3.0);
        let a = bce_with_logits(&mut tape, neg, 0.0).unwrap();
        let b = bce_with_logits(&mut tape, pos, 1.0).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());

        assert!(matches!(bce_with_logits(&mut tape, z, 0.5), Err(AdError::InvalidLabel(_))));
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        for &logit in &[-1e6, -1e3, -20.0, 0.0, 20.0, 1e3, 1e6] {
            for label in [0.0, 1.0] {
                let mut tape = Tape::new();
                let x = s(&mut tape, logit);
                let l = bce_with_logits(&mut tape, x, label).unwrap();
                tape.backward(l).unwrap();
                assert!(tape.value(l).item().is_finite());
                assert!(tape.grad(x).unwrap()[0].is_finite());
            }
        }
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = s(&mut tape, 1.5);
        let l = mse_loss(&mut tape, a, 1.5).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut tape = Tape::new();
        let a = s(&mut tape, 0.0);
        let l = mse_loss(&mut tape, a, 2.0).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-4.0]);
    }

    #[test]
    fn grl_forward_and_backward() {
        let mut tape = Tape::new();
        let x = v(&mut tape, &[1.5, -2.0]);
        let y = grl_apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).values(), &[1.5, -2.0]);
        let w = tape.constant(Tensor::vector(vec![0.3, -0.7]).unwrap()).unwrap();
        let prod = tape.mul(y, w).unwrap();
        let l = tape.sum(prod).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.3, -0.7]);
        assert_eq!(tape.grad(x).unwrap(), &[-0.3, 0.7]);
    }

    #[test]
    fn mse_through_grl_negates_gradient() {
        let grad = |reverse: bool| {
            let mut tape = Tape::new();
            let x = s(&mut tape, 0.7);
            let y = if reverse { grl_apply(&mut tape, x).unwrap() } else { x };
            let l = mse_loss(&mut tape, y, -0.4).unwrap();
            tape.backward(l).unwrap();
            tape.grad(x).unwrap()[0]
        };
        assert_eq!(grad(true).to_bits(), (-grad(false)).to_bits());
    }

    #[test]
    fn mean_of_losses() {
        let mut tape = Tape::new();
        let a = s(&mut tape, 1.0);
        let b = s(&mut tape, 3.0);
        let m = mean_of(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5]);
    }
}
