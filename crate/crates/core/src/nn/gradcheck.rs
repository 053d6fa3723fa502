use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter, relative error)` in name order.
    pub per_param: Vec<(String, f64)>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares taped gradients with central differences for every scalar of
/// every parameter in `store`.
///
/// The relative error of a parameter tensor is
/// `max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`,
/// i.e. element errors are measured against the tensor's gradient scale.
/// Tensors whose gradients are both identically zero report zero error.
///
/// `loss_fn` must be deterministic; it is evaluated twice at the base point
/// and any difference is reported as [`Error::NonDeterministic`].
pub fn finite_difference_check<F>(
    store: &ParamStore,
    loss_fn: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let first = g.value(loss).item();
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = g.backward(loss)?;

    let mut probe = store.clone();
    let mut per_param = Vec::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name).map_or(0, |t| t.len());
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.value(&name).unwrap().data()[i];
            probe.value_mut(&name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.value_mut(&name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.value_mut(&name).unwrap().data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let zeros = vec![0.0; n];
        let exact = analytic.get(&name).map_or(&zeros[..], |t| t.data());
        let scale = exact
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = exact
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let err = if scale == 0.0 { 0.0 } else { worst / scale };
        per_param.push((name, err));
    }
    let max_error = per_param.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    Ok(GradCheckReport {
        per_param,
        max_error,
        tolerance: tol,
        passed: max_error <= tol,
    })
}
