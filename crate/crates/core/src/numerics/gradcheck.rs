/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1, |g_fd|)` over checked coordinates; infinite
    /// when any coordinate failed to evaluate.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates where `f` was non-finite at a perturbed point.
    pub failed: Vec<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.failed.is_empty() && self.max_rel_error <= tol
    }
}

/// Compares an analytic gradient against central differences of `f` at `params`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), params.len(), "gradient and parameter lengths differ");
    let mut point = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        failed: Vec::new(),
    };
    for i in 0..params.len() {
        point[i] = params[i] + h;
        let up = f(&point);
        point[i] = params[i] - h;
        let down = f(&point);
        point[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            report.failed.push(i);
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    if !report.failed.is_empty() {
        report.max_rel_error = f64::INFINITY;
    }
    report
}
