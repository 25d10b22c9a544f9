//! Finite-difference verification of analytic gradients.

use super::{Graph, Tensor, VarId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Relative-difference pass threshold.
    pub tolerance: f64,
    /// Entries where analytic and numeric agree within this absolute
    /// bound pass outright and are left out of the relative maximum:
    /// central differences carry ~|f|·ulp/eps of noise, so a near-zero
    /// gradient can only be verified absolutely.
    pub abs_tolerance: f64,
    /// Check at most this many entries per parameter (deterministic
    /// stride over the flat data); `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    /// A mismatching entry is excluded (not failed) when some relu input
    /// came within this window of zero during its perturbed evaluations:
    /// the subgradient there is ambiguous and the central difference
    /// straddles the kink.
    pub kink_window: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            abs_tolerance: 1e-8,
            max_entries_per_param: None,
            kink_window: 1e-5,
        }
    }
}

/// Comparison outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// Analytic-vs-numeric gradient comparison over all parameters.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub eps: f64,
    pub tolerance: f64,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub excluded: usize,
    pub pass: bool,
}

impl GradReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: max rel diff {:.3e}, max abs diff {:.3e}, {} excluded (eps {:.1e}, tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_diff,
            self.max_abs_diff,
            self.excluded,
            self.eps,
            self.tolerance,
        )
    }
}

/// Relative difference used throughout: `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn relative_diff(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare analytic gradients of `build` against central finite
/// differences at every (sampled) parameter entry.
///
/// `build` must deterministically construct a scalar loss from the given
/// parameter leaves; two forward evaluations that disagree are an error.
pub fn grad_check<S, F>(
    build: F,
    params: &[Tensor<S>],
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[VarId]) -> Result<VarId>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config("grad_check: eps must be positive".into()));
    }
    let eval = |tensors: &[Tensor<S>]| -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let leaves: Vec<VarId> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &leaves)?;
        let v = g.value(root).item()?;
        let kink = g
            .relu_kink_proximity()
            .map(|k| k.to_f64())
            .unwrap_or(f64::INFINITY);
        Ok((v.to_f64(), kink))
    };

    // Determinism gate: the same inputs must give bitwise the same loss.
    let (v0, _) = eval(params)?;
    let (v1, _) = eval(params)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::Graph(format!(
            "grad_check: function is not deterministic ({v0} vs {v1})"
        )));
    }

    // Analytic pass.
    let mut graph = Graph::new();
    let leaves: Vec<VarId> = params.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let root = build(&mut graph, &leaves)?;
    let grads = graph.backward(root)?;

    let eps = S::from_f64(opts.eps);
    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    let mut all_abs: f64 = 0.0;
    let mut all_rel: f64 = 0.0;
    let mut total_excluded = 0;
    let mut pass = true;

    for (pi, param) in params.iter().enumerate() {
        let analytic = grads
            .get(leaves[pi])
            .ok_or_else(|| Error::Graph("grad_check: missing leaf gradient".into()))?
            .clone();
        let n = param.numel();
        let stride = match opts.max_entries_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut report = ParamReport {
            max_abs_diff: 0.0,
            max_rel_diff: 0.0,
            checked: 0,
            excluded: 0,
        };
        for j in (0..n).step_by(stride) {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let (f_plus, kink_plus) = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let (f_minus, kink_minus) = eval(&work)?;
            work[pi].data_mut()[j] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * opts.eps);
            let a = analytic.data()[j].to_f64();
            let abs = (a - numeric).abs();
            let rel = relative_diff(a, numeric);
            if rel > opts.tolerance {
                // near-zero gradients can only be verified absolutely:
                // the difference quotient carries ~|f|·ulp/eps of noise
                if abs <= opts.abs_tolerance {
                    report.checked += 1;
                    report.max_abs_diff = report.max_abs_diff.max(abs);
                    continue;
                }
                if kink_plus.min(kink_minus) <= opts.kink_window {
                    report.excluded += 1;
                    continue;
                }
            }
            report.checked += 1;
            report.max_abs_diff = report.max_abs_diff.max(abs);
            report.max_rel_diff = report.max_rel_diff.max(rel);
        }
        if report.max_rel_diff > opts.tolerance {
            pass = false;
        }
        all_abs = all_abs.max(report.max_abs_diff);
        all_rel = all_rel.max(report.max_rel_diff);
        total_excluded += report.excluded;
        reports.push(report);
    }

    Ok(GradReport {
        params: reports,
        eps: opts.eps,
        tolerance: opts.tolerance,
        max_abs_diff: all_abs,
        max_rel_diff: all_rel,
        excluded: total_excluded,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_regression_loss_passes() {
        // loss = mean((x@w - y)^2) for fixed x, y
        let x = Tensor::<f64>::from_f64s(&[3, 2], &[0.4, -1.2, 2.0, 0.3, -0.7, 1.5]).unwrap();
        let y = Tensor::<f64>::from_f64s(&[3, 1], &[0.5, -1.0, 0.25]).unwrap();
        let w = Tensor::<f64>::from_f64s(&[2, 1], &[0.1, -0.2]).unwrap();
        let report = grad_check(
            |g, params| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                let pred = g.matmul(xv, params[0])?;
                let diff = g.sub(pred, yv)?;
                let sq = g.mul(diff, diff)?;
                g.mean_all(sq)
            },
            &[w],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "{}", report.summary());
        assert!(report.max_rel_diff < 1e-4);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let w = Tensor::<f64>::from_f64s(&[2], &[1.0, -2.0]).unwrap();
        let report = grad_check(
            |g, _params| Ok(g.constant_scalar(3.5)),
            &[w],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.max_abs_diff, 0.0);
    }

    #[test]
    fn relu_kink_at_zero_is_excluded_not_failed() {
        // w = 0 exactly: relu'(0) is ambiguous, central diff gives 0.5
        // while the analytic convention here gives 0.
        let w = Tensor::<f64>::from_f64s(&[1], &[0.0]).unwrap();
        let report = grad_check(
            |g, params| {
                let r = g.relu(params[0])?;
                g.sum_all(r)
            },
            &[w],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "{}", report.summary());
        assert_eq!(report.excluded, 1);
        assert_eq!(report.params[0].checked, 0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let w = Tensor::<f64>::from_f64s(&[1], &[1.0]).unwrap();
        let opts = GradCheckOptions {
            eps: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|g, p| g.sum_all(p[0]), &[w], &opts).is_err());
    }
}
