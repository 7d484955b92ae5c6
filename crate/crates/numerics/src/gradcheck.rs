use crate::{ParamStore, Result, Tape, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest [`relative_error`] over all checked coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(parameter, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.checked == 0
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
///
/// The floor keeps coordinates whose true gradient is (near) zero from
/// reporting pure rounding noise as a large relative error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// the given `step`, coordinate by coordinate, over every parameter in
/// `store`. `f` must be deterministic (evaluation-mode tape, no dropout).
pub fn grad_check<F>(store: &mut ParamStore<f64>, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut report = GradCheckReport::default();
    if store.is_empty() {
        return Ok(report);
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss, store)?
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), i, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
