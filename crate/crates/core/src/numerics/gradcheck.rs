//! Central finite-difference gradient checking.

use super::{Graph, NumericsError, ParamId, ParamStore, Var};

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

/// Compares backward-pass gradients of `loss_fn` against central differences
/// with step `h` for every element of `params`.
///
/// `floor` keeps the relative error meaningful where both gradients vanish.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    floor: f64,
    loss_fn: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in params {
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
