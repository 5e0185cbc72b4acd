//! Central finite-difference gradient checking.
//!
//! The checker sees only a loss closure and a parameter vector. It knows
//! nothing about the tape, so it stays an independent oracle for whatever
//! backward implementation produced the analytic gradient. Parameters are
//! perturbed in f32 and restored bit-exactly between probes; the closure
//! reports the loss in f64 (the tape exposes its reduction totals before
//! the final f32 rounding) so the quotient is not drowned by rounding of
//! the total.

/// Step used by every gradient check in the crate.
pub const FD_EPS: f32 = 1e-3;

/// Acceptance threshold on `|analytic - fd| / (|fd| + 1e-6)`.
pub const FD_REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub fd_at_worst: f64,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.max_rel_err < FD_REL_TOL
    }
}

/// Compare `analytic` against central finite differences of `loss` at `theta`.
///
/// `loss` must be a pure function of its argument; it is called twice per
/// element of `theta`.
pub fn check_gradient<F>(loss: F, theta: &[f32], analytic: &[f32]) -> FdReport
where
    F: FnMut(&[f32]) -> f64,
{
    check_gradient_with_eps(loss, theta, analytic, FD_EPS)
}

/// [`check_gradient`] with an explicit step. Smaller steps suit losses with
/// strong third derivatives (normalization layers over small-magnitude
/// activations), where the default step's truncation term dominates the
/// comparison.
pub fn check_gradient_with_eps<F>(
    mut loss: F,
    theta: &[f32],
    analytic: &[f32],
    eps: f32,
) -> FdReport
where
    F: FnMut(&[f32]) -> f64,
{
    assert_eq!(
        theta.len(),
        analytic.len(),
        "analytic gradient length must match parameter length"
    );
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        fd_at_worst: 0.0,
    };
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let saved = probe[i];
        probe[i] = saved + eps;
        let up = loss(&probe);
        probe[i] = saved - eps;
        let down = loss(&probe);
        probe[i] = saved;
        // Denominator uses the realized f32 step, which can differ from
        // the nominal one after rounding into the parameter's ulp grid.
        let step = (saved + eps) as f64 - (saved - eps) as f64;
        let fd = (up - down) / step;
        let rel = (analytic[i] as f64 - fd).abs() / (fd.abs() + 1e-6);
        if rel > report.max_rel_err {
            report = FdReport {
                max_rel_err: rel,
                worst_index: i,
                analytic_at_worst: analytic[i] as f64,
                fd_at_worst: fd,
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_a_wrong_gradient() {
        // loss = sum of squares, true grad = 2x
        let theta = [0.3f32, -0.7, 1.1];
        let loss = |x: &[f32]| x.iter().map(|v| (*v as f64) * (*v as f64)).sum();
        let good: Vec<f32> = theta.iter().map(|v| 2.0 * v).collect();
        let mut bad = good.clone();
        bad[1] += 0.05;
        assert!(check_gradient(loss, &theta, &good).ok());
        let report = check_gradient(loss, &theta, &bad);
        assert!(!report.ok());
        assert_eq!(report.worst_index, 1);
    }
}
