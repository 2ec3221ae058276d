//! Central finite differences against tape gradients.

use super::param::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation for the central difference.
    pub step: f64,
    /// Largest tolerated relative error.
    pub tolerance: f64,
    /// Gradient magnitudes below this are compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Names of trainable parameters that were checked.
    pub parameters: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(loss(θ+h) − loss(θ−h)) / 2h` for every scalar of every
/// trainable parameter in the store returned by `store`. The model is restored afterwards.
pub fn finite_difference_check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore<f64>,
    analytic: &Gradients<f64>,
    cfg: &GradCheckConfig,
    mut loss: impl FnMut(&M) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store(model).ids().collect();
    for id in ids {
        let (name, trainable, n, grad) = {
            let s = store(model);
            let p = s.get(id);
            let g = analytic.get(s, id).cloned();
            (p.name.clone(), p.trainable, p.value.data().len(), g)
        };
        if !trainable {
            continue;
        }
        report.parameters.push(name.clone());
        for k in 0..n {
            let original = store(model).get(id).value.data()[k];
            store(model).get_mut(id).value.data_mut()[k] = original + cfg.step;
            let plus = loss(model)?;
            store(model).get_mut(id).value.data_mut()[k] = original - cfg.step;
            let minus = loss(model)?;
            store(model).get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[k]);
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if rel > cfg.tolerance {
                report.failures += 1;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
