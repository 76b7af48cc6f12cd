//! Central finite differences: the independent oracle for every analytic
//! gradient in the crate.

use super::params::{GradRecord, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate `(f(θ + h·e) - f(θ - h·e)) / 2h` for every
/// coordinate of every trainable parameter.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamStore, step: f64) -> Result<GradRecord>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} must be > 0")));
    }
    let mut work = params.clone();
    let mut out = GradRecord::new();
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    for id in ids {
        let n = params.tensor(id).len();
        let mut g = vec![0.0; n];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = params.tensor(id).data()[k];
            work.tensor_mut(id).data_mut()[k] = orig + step;
            let plus = eval(&mut f, &work, params.name(id))?;
            work.tensor_mut(id).data_mut()[k] = orig - step;
            let minus = eval(&mut f, &work, params.name(id))?;
            work.tensor_mut(id).data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * step);
        }
        out.insert(id, Tensor::new(params.tensor(id).shape().to_vec(), g)?);
    }
    Ok(out)
}

fn eval<F>(f: &mut F, p: &ParamStore, name: &str) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let v = f(p)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("finite difference around `{name}`"),
        });
    }
    Ok(v)
}

/// Element-wise relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst element-wise disagreement between two gradient records.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic and numeric gradients over every trainable parameter.
/// A parameter missing from the analytic record counts as a zero gradient.
pub fn compare_grads(params: &ParamStore, analytic: &GradRecord, numeric: &GradRecord) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (id, num) in numeric.iter() {
        let zeros;
        let ana = match analytic.get(id) {
            Some(t) => t.data(),
            None => {
                zeros = vec![0.0; num.len()];
                &zeros
            }
        };
        for (k, (&a, &b)) in ana.iter().zip(num.data()).enumerate() {
            report.checked += 1;
            let e = relative_error(a, b);
            if e > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = e;
                report.worst_param = params.name(id).to_string();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = b;
            }
        }
    }
    report
}

/// Runs `loss` through the tape and through finite differences and compares.
pub fn check_gradients<F>(params: &ParamStore, step: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut super::Graph<'_>) -> Result<super::Var>,
{
    let analytic = {
        let mut g = super::Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let numeric = finite_diff_grad(
        |p| {
            let mut g = super::Graph::new(p);
            let l = loss(&mut g)?;
            g.item(l)
        },
        params,
        step,
    )?;
    Ok(compare_grads(params, &analytic, &numeric))
}
