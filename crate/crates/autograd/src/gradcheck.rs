use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
    /// Every element above `rel_tol`.
    pub failures: Vec<GradMismatch>,
    pub rel_tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar built by `f` against central
/// finite differences over every element of `params`.
pub fn grad_check<F>(f: F, store: &ParamStore, params: &[ParamId], rel_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &analytic_store)?;
    g.backward(loss, &mut analytic_store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut probe = store.clone();
    let mut checked = 0;
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut failures = Vec::new();
    for &id in params {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = analytic_store.grad(id).data()[i];
            let err = relative_error(analytic, numeric);
            checked += 1;
            let mismatch = || GradMismatch {
                param: store.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: err,
            };
            if err > rel_tol {
                failures.push(mismatch());
            }
            if err > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(err);
                worst = Some(mismatch());
            }
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_error,
        worst,
        failures,
        rel_tol,
        passed: max_rel_error <= rel_tol,
    })
}
