//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! as trainable leaves through [`ParamGroup::register`]; everything else is a
//! constant. [`Tape::backward`] sweeps the tape once in reverse from a scalar
//! root and returns the gradient of every reachable leaf.

mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use optim::{accumulate_grads, adam_step, adam_step_all, AdamConfig, GroupVars, ParamGroup};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::encode_scalar;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn sin_of_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.forward_op(OpKind::Sin, &[x]).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let v = tape.constant(Tensor::vector(vec![0.3, -2.0, 7.5]));
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -2.0, 7.5]);
    }

    #[test]
    fn huber_quadratic_branch_matches_closed_form() {
        let delta = 0.5;
        let (a, b) = (1.3, 1.05);
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::scalar(a));
        let vb = tape.constant(Tensor::scalar(b));
        let h = tape.forward_op(OpKind::Huber(delta), &[va, vb]).unwrap();
        let direct = 0.5 * (a - b) * (a - b);
        assert!((tape.value(h).item() - direct).abs() < 1e-15);

        let mut tape = Tape::new();
        let va = tape.constant(Tensor::scalar(3.0));
        let vb = tape.constant(Tensor::scalar(1.0));
        let h = tape.huber(va, vb, delta).unwrap();
        assert!((tape.value(h).item() - delta * (2.0 - 0.5 * delta)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 4]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 4]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let root = tape.sum(sq);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(grads.get(root).unwrap(), &[1.0]);
    }

    #[test]
    fn constant_root_gives_zero_parameter_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let root = tape.square(c);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get_or_zeros(w, 2), vec![0.0, 0.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn cumprod_handles_exact_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 4, vec![0.5, 0.0, 2.0, 3.0]).unwrap());
        let y = tape.cumprod_exclusive(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.5, 0.0, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // d/dx0 = 1 + x1 + x1 x2 = 1; d/dx1 = x0 + x0 x2 = 1.5; d/dx2 = x0 x1 = 0.
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn posenc_layout() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let e = tape.posenc(p, 2, true).unwrap();
        let v = tape.value(e).data();
        assert_eq!(v.len(), 10);
        assert_eq!(&v[..5], &[0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(v[5], 1.0);
        assert!(v[6].abs() < 1e-12 && (v[7] + 1.0).abs() < 1e-12);
    }
}
