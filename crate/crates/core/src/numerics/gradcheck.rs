use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

/// Denominator floor for relative errors, so entries whose true gradient is
/// essentially zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `f` against central differences
/// `(f(p+eps) − f(p−eps)) / 2eps` for every entry of every parameter.
///
/// `f` must build the loss on the supplied tape using the current values in
/// the store; it is called `1 + 2·n` times for `n` parameter entries.
pub fn check_gradients<T, F>(store: &ParamStore<T>, eps: T, mut f: F) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::Contract("gradient check step must be positive".into()));
    }
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    check_finite(tape.value(loss).item()?)?;
    tape.backward(loss)?.accumulate_into(&mut work)?;
    let analytic: Vec<_> = work.iter().map(|p| p.grad()).collect();
    work.zero_grad();

    let mut eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        check_finite(t.value(l).item()?)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        n_checked: 0,
    };
    let ids: Vec<_> = work.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..work.value(id).len() {
            let orig = work.value(id).as_slice()[k];
            work.value_mut(id).as_mut_slice()[k] = orig + eps;
            let plus = eval(&work)?;
            work.value_mut(id).as_mut_slice()[k] = orig - eps;
            let minus = eval(&work)?;
            work.value_mut(id).as_mut_slice()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps.as_f64());
            let a = analytic[pi].as_slice()[k].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.n_checked += 1;
        }
    }
    Ok(report)
}

fn check_finite<T: Scalar>(v: T) -> Result<f64> {
    if v.is_finite() {
        Ok(v.as_f64())
    } else {
        Err(Error::Numerical("loss evaluated to a non-finite value".into()))
    }
}
