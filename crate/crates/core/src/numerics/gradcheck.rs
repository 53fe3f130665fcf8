use super::{ParamId, ParamStore, Real, Tape, Var};
use crate::{Error, Result};

/// Central-difference step used by the gradient checks.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Denominator floor of the relative error, so that gradients that are
/// (numerically) zero are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare tape gradients of `loss` against central finite differences.
///
/// `loss` records a scalar graph for the parameters in `store`. Every scalar
/// of every trainable tensor is perturbed by ±`h`; the relative error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, h: f64, loss: F) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Evaluation(format!("step must be positive, got {h}")));
    }
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(store, &mut tape)?;
        let v = tape.scalar(l).f64();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("loss is {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    if !tape.scalar(l).f64().is_finite() {
        return Err(Error::Evaluation("loss is not finite".into()));
    }
    tape.backward(l);
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| match tape.param_grad(id) {
            Some(g) => g.data().iter().map(|v| v.f64()).collect(),
            None => vec![0.0; store.get(id).value.len()],
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (&id, grads) in ids.iter().zip(&analytic) {
        for (k, &a) in grads.iter().enumerate() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + T::of(h);
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - T::of(h);
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
