//! Finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SrnnError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Gradients smaller than this are compared absolutely: below it the
/// rounding error of the central difference dominates the quotient.
pub const DENOM_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

fn scalar_of<S: Scalar>(tape: &Tape<S>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(SrnnError::Input(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item().to_f64().unwrap_or(f64::NAN))
}

/// Compares the tape gradient of `f` at `point` against central
/// differences `(f(x+h) − f(x−h)) / 2h`, returning the largest relative
/// error over all elements.
pub fn gradcheck<S, F>(f: F, point: &Tensor<S>, h: S) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", point.clone())?;
    gradcheck_store(
        &store,
        |tape, store| {
            let x = tape.param(store, id);
            f(tape, x)
        },
        h,
        None,
    )
}

/// Finite-difference check over parameters of a store.
///
/// `limit` caps the number of elements probed per parameter (taken
/// evenly spaced) so large models stay affordable.
pub fn gradcheck_store<S, F>(store: &ParamStore<S>, f: F, h: S, limit: Option<usize>) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    scalar_of(&tape, loss)?;
    let mut grads = Gradients::new(store.len());
    tape.backward(loss, &mut grads)?;

    let mut probe = store.clone();
    let two_h = (h + h).to_f64().unwrap_or(f64::NAN);
    let mut worst = 0.0f64;
    for pid in 0..store.len() {
        let pid = ParamId(pid);
        let numel = store.get(pid).value.numel();
        let stride = limit.map_or(1, |l| numel.div_ceil(l.max(1)).max(1));
        for at in (0..numel).step_by(stride) {
            let original = store.get(pid).value.data()[at];

            probe.get_mut(pid).value.data_mut()[at] = original + h;
            let mut t = Tape::new();
            let v = f(&mut t, &probe)?;
            let plus = scalar_of(&t, v)?;

            probe.get_mut(pid).value.data_mut()[at] = original - h;
            let mut t = Tape::new();
            let v = f(&mut t, &probe)?;
            let minus = scalar_of(&t, v)?;

            probe.get_mut(pid).value.data_mut()[at] = original;

            let numeric = (plus - minus) / two_h;
            let analytic = grads
                .get(pid)
                .map_or(0.0, |g| g.data()[at].to_f64().unwrap_or(f64::NAN));
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let err = gradcheck(
            |tape, _x| Ok(tape.constant(Tensor::scalar(4.0))),
            &Tensor::vector(vec![1.0, 2.0]),
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_form() {
        let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![-0.3, 1.5]]).unwrap();
        let point = Tensor::from_rows(&[vec![0.7, -1.2]]).unwrap();
        let err = gradcheck(
            |tape, x| {
                let a = tape.constant(a.clone());
                let ax = tape.matmul_t(x, a)?; // x Aᵀ
                let prod = tape.mul(ax, x)?;
                Ok(tape.sum_all(prod))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }
}
