//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Tape`] records each forward op together with its value. Calling
//! [`Tape::backward`] on a scalar node sweeps the tape once in reverse and
//! returns the gradient for every leaf registered with [`Tape::param`].
//!
//! Complex quantities never appear as a type here: callers carry real and
//! imaginary planes as separate nodes (see [`complex_hermitian_dot`]).
//!
//! ```
//! use l2o_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `sum_i conj(a_i) * b_i` for vectors given as real/imaginary planes.
///
/// Returns `(re, im)` as two shape-`[1]` nodes.
pub fn complex_hermitian_dot(
    tape: &mut Tape,
    a_re: NodeId,
    a_im: NodeId,
    b_re: NodeId,
    b_im: NodeId,
) -> Result<(NodeId, NodeId)> {
    let shapes = [tape.shape(a_re), tape.shape(a_im), tape.shape(b_re), tape.shape(b_im)];
    if shapes.iter().any(|s| *s != shapes[0]) {
        return Err(Error::shape("complex_hermitian_dot", &shapes));
    }
    // (ar - i ai)(br + i bi) = (ar br + ai bi) + i (ar bi - ai br)
    let rr = tape.mul(a_re, b_re)?;
    let ii = tape.mul(a_im, b_im)?;
    let re = tape.add(rr, ii)?;
    let re = tape.sum(re);
    let ri = tape.mul(a_re, b_im)?;
    let ir = tape.mul(a_im, b_re)?;
    let im = tape.sub(ri, ir)?;
    let im = tape.sum(im);
    Ok((re, im))
}

/// Largest per-coordinate relative gap between the tape gradient of `f` at `x`
/// and a central difference with step `eps`:
/// `|ad - fd| / (|fd| + 1e-12)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!("eps must be positive, got {eps}")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.param(point.clone());
        let root = f(&mut tape, p)?;
        Ok(tape.scalar(root))
    };

    let mut tape = Tape::new();
    let p = tape.param(x.clone());
    let root = f(&mut tape, p)?;
    let f0 = tape.scalar(root);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {f0}")));
    }
    let grads = tape.backward(root)?;
    let ad = grads.get(p).expect("registered parameter");

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * eps);
        let rel = (ad.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_node(tape: &mut Tape, v: &[f64]) -> NodeId {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let a = t.constant(Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 7.0]).unwrap());
        let r = t.matmul(i, a).unwrap();
        assert_eq!(t.value(r), t.value(a));
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = vec_node(&mut t, &[-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let x = vec_node(&mut t, &[3.0, 4.0]);
        let s = t.square(x);
        let r = t.sum(s);
        assert_eq!(t.scalar(r), 25.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = vec_node(&mut t, &[1.0, 2.0]);
        let b = vec_node(&mut t, &[1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(m, m).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = vec_node(&mut t, &[1.0, -1.0]);
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(t.sqrt(x), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn analytic_gradients() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let r = t.square(x);
        assert_eq!(t.backward(r).unwrap().get(x).unwrap().item(), 6.0);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.param(Tensor::scalar(5.0));
        let r = t.mul(x, y).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn hermitian_dot_units() {
        let mut t = Tape::new();
        let one = vec_node(&mut t, &[1.0]);
        let zero = vec_node(&mut t, &[0.0]);
        let (re, im) = complex_hermitian_dot(&mut t, one, zero, one, zero).unwrap();
        assert_eq!((t.scalar(re), t.scalar(im)), (1.0, 0.0));
        let (re, im) = complex_hermitian_dot(&mut t, zero, one, zero, one).unwrap();
        assert_eq!((t.scalar(re), t.scalar(im)), (1.0, 0.0));
        let two = vec_node(&mut t, &[1.0, 2.0]);
        assert!(complex_hermitian_dot(&mut t, one, zero, two, zero).is_err());
    }

    #[test]
    fn fd_check_quadratic() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 4.0]);
        let err = finite_difference_check(
            |t, p| {
                let s = t.square(p);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fd_check_rejects_nonfinite() {
        let x = Tensor::scalar(1000.0);
        let r = finite_difference_check(
            |t, p| {
                let e = t.exp(p);
                Ok(t.sum(e))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn cumprod_values() {
        let mut t = Tape::new();
        let x = vec_node(&mut t, &[2.0, 3.0, 0.5]);
        let c = t.cumprod_exclusive(x);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 6.0, 3.0]);
    }

    #[test]
    fn solve_spd_solves() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![4.0, 1.0, 1.0, 3.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let x = t.solve_spd(a, b).unwrap();
        let v = t.value(x).data();
        assert!((4.0 * v[0] + v[1] - 1.0).abs() < 1e-14);
        assert!((v[0] + 3.0 * v[1] - 2.0).abs() < 1e-14);
    }
}
