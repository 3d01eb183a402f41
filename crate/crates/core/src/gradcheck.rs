//! Central finite-difference verification of autodiff gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|autodiff|, |numeric|, SCALE_FLOOR)`.
const SCALE_FLOOR: f64 = 1e-4;
/// One-sided slopes that disagree by more than this (relative) mark a kink.
const KINK_JUMP: f64 = 1e-2;
/// Absolute floor on the one-sided jump; smooth curvature gives about `h·f''`.
const KINK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error among checked coordinates.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates excluded because `f` has a kink there.
    pub kinks: Vec<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&g, v)?;
    let value = out.value();
    if value.len() != 1 {
        return Err(Error::Input {
            op: "finite_diff_check",
            detail: format!("function must be scalar-valued, got {:?}", value.shape()),
        });
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(Error::Numeric {
            op: "finite_diff_check",
            detail: format!("f evaluated to {y}"),
        });
    }
    Ok(y)
}

/// Compares the autodiff gradient of scalar `f` at `x` against central
/// differences with step `h`, skipping coordinates where the one-sided
/// slopes disagree (hinge kinks).
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// As [`finite_diff_check`], probing only the listed coordinates.
pub fn finite_diff_check_at<F>(
    f: F,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&g, v)?;
    let y0 = out.value();
    if y0.len() != 1 || !y0.item().is_finite() {
        return Err(Error::Numeric {
            op: "finite_diff_check",
            detail: format!("f evaluated to {:?}", y0.data()),
        });
    }
    let y0 = y0.item();
    let analytic = g.backward(out)?.wrt(v);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        kinks: Vec::new(),
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Input {
                op: "finite_diff_check",
                detail: format!("coordinate {i} out of range for {} entries", x.len()),
            });
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let forward = (plus - y0) / h;
        let backward = (y0 - minus) / h;
        let jump_limit = (KINK_JUMP * forward.abs().max(backward.abs())).max(KINK_FLOOR);
        if (forward - backward).abs() > jump_limit {
            report.kinks.push(i);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(SCALE_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        for x in [vec![1.0, -2.0, 3.5], vec![0.0, 0.1, -7.0]] {
            let t = Tensor::row(x);
            let r = finite_diff_check(|_, v| Ok(v.square().sum()), &t, DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error < 1e-8, "{r:?}");
            assert!(r.kinks.is_empty());
            assert_eq!(r.checked, 3);
        }
    }

    #[test]
    fn hinge_kink_is_flagged_not_failed() {
        let t = Tensor::row(vec![0.0, 1.0]);
        let r = finite_diff_check(|_, v| Ok(v.relu().sum()), &t, DEFAULT_STEP).unwrap();
        assert_eq!(r.kinks, vec![0]);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let t = Tensor::row(vec![1.0]);
        let r = finite_diff_check(|_, v| Ok(v.scale(f64::INFINITY).sum()), &t, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // detach drops the quadratic term from the tape.
        let t = Tensor::row(vec![0.7, -0.3]);
        let r = finite_diff_check(
            |_, v| v.detach().square().sum().add(&v.sum()),
            &t,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
