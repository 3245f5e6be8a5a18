use std::collections::BTreeMap;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamMap};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: the error of a component is
    /// `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`,
    /// and exactly 0 when both gradients are 0.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, abs_floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Compares analytic gradients against central finite differences for every
/// scalar of every parameter in `params`.
///
/// `build` must construct the same function on each call: it receives a fresh
/// graph with `params` already registered and returns the scalar loss node.
pub fn grad_check<T, F>(params: &ParamMap<T>, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &BTreeMap<String, NodeId>) -> Result<NodeId, AutodiffError>,
{
    let eval = |p: &ParamMap<T>, want_grads: bool| -> Result<(f64, Option<ParamMap<T>>), AutodiffError> {
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, value) in p {
            ids.insert(name.clone(), g.param(name.clone(), value.clone())?);
        }
        let loss = build(&mut g, &ids)?;
        let value = g.value(loss).item().to_f64_lossy();
        let grads = if want_grads { Some(g.backward(loss)?.param_map()) } else { None };
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0 };
    let mut work = params.clone();
    for (name, value) in params {
        for i in 0..value.len() {
            let orig = value.data()[i];
            let h = T::cast(cfg.step);
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let (plus, _) = eval(&work, false)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let (minus, _) = eval(&work, false)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let exact = analytic[name].data()[i].to_f64_lossy();
            let err = relative_error(exact, numeric, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
