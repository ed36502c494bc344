//! Central finite-difference check of analytic parameter gradients.

use super::{ChartModel, Gradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|fd - analytic| / max(|fd|, |analytic|, floor)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Parameters whose `±step` perturbation switched a ReLU unit; the
    /// objective is not differentiable across that interval.
    pub skipped_kinks: usize,
}

/// Compares `analytic` with central differences of `objective` at `step`.
/// `pattern` returns the ReLU activation pattern of the evaluation points.
pub fn check_gradients(
    model: &ChartModel<f64>,
    analytic: &Gradients<f64>,
    step: f64,
    floor: f64,
    objective: impl Fn(&ChartModel<f64>) -> f64,
    pattern: impl Fn(&ChartModel<f64>) -> Vec<bool>,
) -> GradCheck {
    let base = pattern(model);
    let mut out = GradCheck { max_rel_error: 0.0, worst_index: 0, checked: 0, skipped_kinks: 0 };
    let mut probe = model.clone();
    for i in 0..model.num_params() {
        let orig = model.params()[i];
        probe.params_mut()[i] = orig + step;
        let (f_plus, p_plus) = (objective(&probe), pattern(&probe));
        probe.params_mut()[i] = orig - step;
        let (f_minus, p_minus) = (objective(&probe), pattern(&probe));
        probe.params_mut()[i] = orig;
        if p_plus != base || p_minus != base {
            out.skipped_kinks += 1;
            continue;
        }
        let fd = (f_plus - f_minus) / (2.0 * step);
        let an = analytic.as_slice()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        out.checked += 1;
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = i;
        }
    }
    out
}
