//! Central-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
    /// Every compared entry, in parameter order.
    pub checks: Vec<EntryCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheckReport {
    /// Entries whose relative error exceeds `tol`.
    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &EntryCheck> {
        self.checks.iter().filter(move |c| c.rel_error > tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn scalar_value(g: &Graph, root: Var) -> Result<f64> {
    let value = g.value(root);
    if !value.is_scalar() {
        return Err(TensorError::NonScalarRoot(value.shape().to_vec()));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

fn evaluate<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    scalar_value(&g, root)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every entry of every parameter in `store`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, eps, f)
}

/// Like [`grad_check`] but restricted to the listed parameters.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    store.zero_grads();
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    scalar_value(&g, root)?;
    g.backward(root, store)?;
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
        checks: Vec::new(),
    };
    for &id in ids {
        let n = store.value(id).numel();
        for k in 0..n {
            let original = store.value(id).data()[k];
            store.get_mut(id).value_mut().data_mut()[k] = original + eps;
            let plus = evaluate(&mut f, store);
            store.get_mut(id).value_mut().data_mut()[k] = original - eps;
            let minus = evaluate(&mut f, store);
            store.get_mut(id).value_mut().data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = store.get(id).grad().data()[k];
            let err = relative_error(analytic, numeric);
            report.entries += 1;
            report.checks.push(EntryCheck {
                param: id,
                index: k,
                analytic,
                numeric,
                rel_error: err,
            });
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name().to_string(), k));
            }
        }
    }
    Ok(report)
}
