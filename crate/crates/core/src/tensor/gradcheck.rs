use super::{ParamSet, Tape, Tensor, Var};

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`;
    /// infinite when any evaluation was non-finite.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name and coordinate of the worst error.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }
}

/// Checks every coordinate of every parameter in `params`.
///
/// `f` must build a scalar on the tape and be deterministic: any randomness
/// (dropout) has to be reseeded inside the closure so that each evaluation
/// sees the same draw.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape);
        if !tape.value(out).is_finite() {
            return non_finite(0);
        }
        tape.backward(out).param_grads(params)
    };
    check_against(f, params, eps, &analytic)
}

/// Compares caller-supplied gradients (aligned with `params`) against
/// central differences of `f`.
pub fn check_against<F>(f: F, params: &ParamSet, eps: f64, analytic: &[Tensor]) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let eval = |p: &ParamSet| {
        let mut tape = Tape::new(p);
        let out = f(&mut tape);
        tape.value(out).data()[0]
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let original = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + eps;
            let plus = eval(&probe);
            probe.get_mut(id).data_mut()[k] = original - eps;
            let minus = eval(&probe);
            probe.get_mut(id).data_mut()[k] = original;

            report.coordinates += 1;
            if !plus.is_finite() || !minus.is_finite() {
                return non_finite(report.coordinates);
            }
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[id.0].data()[k];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    report
}

fn non_finite(coordinates: usize) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: f64::INFINITY,
        coordinates,
        worst: None,
    }
}
