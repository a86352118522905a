use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Welch's unequal-variance comparison of sample `a` (candidate) against
/// sample `b` (baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a − mean_b`
    pub diff: f64,
    /// `100·diff / mean_b`, absent when the baseline mean is 0.
    pub uplift_percent: Option<f64>,
    pub t: f64,
    pub dof: f64,
    pub p_value: f64,
    pub confidence: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for `dof` degrees of freedom.
fn two_sided_p(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    beta_reg(0.5 * dof, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// `t*` with `P(|T| ≤ t*) = level`, polished by Newton steps on the
/// incomplete-beta tail.
fn critical_value(dof: f64, level: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, dof).expect("dof > 0");
    let alpha = 1.0 - level;
    let mut t = dist.inverse_cdf(1.0 - 0.5 * alpha);
    for _ in 0..8 {
        let f = two_sided_p(t, dof) - alpha;
        let step = f / (2.0 * dist.pdf(t));
        t += step;
        if step.abs() < 1e-15 * t.abs().max(1.0) {
            break;
        }
    }
    t
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    welch_t_test_at(a, b, 0.95)
}

/// Welch test with a `level` confidence interval for the mean difference.
/// When both samples have zero variance the statistic is degenerate:
/// equal means give `t = 0, p = 1`, different means give `p = 0`.
pub fn welch_t_test_at(a: &[f64], b: &[f64], level: f64) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "Welch test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} must lie in (0, 1)")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let diff = ma - mb;
    let uplift_percent = (mb != 0.0).then(|| 100.0 * diff / mb.abs());
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    let se2 = sa + sb;
    if se2 == 0.0 {
        let dof = (a.len() + b.len() - 2) as f64;
        let (t, p) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(diff), 0.0)
        };
        return Ok(TTestResult {
            mean_a: ma,
            mean_b: mb,
            diff,
            uplift_percent,
            t,
            dof,
            p_value: p,
            confidence: level,
            ci_low: diff,
            ci_high: diff,
        });
    }
    let se = se2.sqrt();
    let t = diff / se;
    let dof = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let half = critical_value(dof, level) * se;
    Ok(TTestResult {
        mean_a: ma,
        mean_b: mb,
        diff,
        uplift_percent,
        t,
        dof,
        p_value: two_sided_p(t, dof),
        confidence: level,
        ci_low: diff - half,
        ci_high: diff + half,
    })
}
