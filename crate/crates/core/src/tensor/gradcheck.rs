//! Finite-difference gradient checking.

use super::params::{GradBuffer, ParamBinder, ParamStore};
use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Differences at or below this are treated as exact agreement.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub coordinates: usize,
    pub passed: bool,
}

/// Relative error of one coordinate: `|a - n| / max(|a|, |n|)`, or zero when
/// the absolute difference is within [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Checks the tape gradient of a scalar function of `x` against central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad());
    let out = f(&mut tape, leaf)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    check_against_numeric(eval, x, &analytic, eps, tol)
}

/// Compares a supplied analytic gradient with central differences of `eval`.
pub fn check_against_numeric<E>(
    eval: E,
    x: &Tensor,
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    E: Fn(&Tensor) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    if analytic.len() != x.len() {
        return Err(Error::invalid(
            "grad_check",
            "analytic gradient length differs from x",
        ));
    }
    let a = eval(x)?;
    let b = eval(x)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::invalid(
            "grad_check",
            format!("function is not deterministic ({a} vs {b})"),
        ));
    }
    let mut worst = 0.0;
    let mut worst_index = 0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        coordinates: x.len(),
        passed: worst < tol,
    })
}

/// Checks every parameter of `store` used by the scalar function `f`.
/// Returns one report per parameter, in store order.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: Fn(&mut Tape, &mut ParamBinder) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(store, true);
    let out = f(&mut tape, &mut binder)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let mut grads = GradBuffer::zeros_like(store);
    binder.accumulate_grads(&tape, &mut grads, 1.0);
    store
        .iter()
        .map(|(id, name, value)| {
            let eval = |v: &Tensor| {
                let mut probe = store.clone();
                *probe.get_mut(id) = v.clone();
                let mut tape = Tape::new();
                let mut binder = ParamBinder::new(&probe, false);
                let out = f(&mut tape, &mut binder)?;
                scalar_of(&tape, out)
            };
            let report = check_against_numeric(eval, value, grads.get(id), eps, tol)?;
            Ok((name.to_owned(), report))
        })
        .collect()
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::invalid(
            "grad_check",
            format!("function must be scalar-valued, got {:?}", t.shape()),
        ));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 4.0, 0.1, -0.7]).unwrap();
        let r = grad_check(|t, v| t.sum(v), &x, 1e-5, 1e-12).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let eval = |p: &Tensor| Ok(p.data().iter().map(|v| v * v).sum::<f64>());
        let wrong: Vec<f64> = x.data().iter().map(|v| 2.0 * v * 1.01).collect();
        let r = check_against_numeric(eval, &x, &wrong, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 5e-3);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let eval = |_: &Tensor| {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        assert!(check_against_numeric(eval, &x, &[0.0], 1e-5, 1e-4).is_err());
    }
}
