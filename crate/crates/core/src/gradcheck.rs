//! Central finite differences, the gradient oracle for every analytic rule.

use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// where `numeric` is the central difference of `f` at `x` with step `eps`.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> f64 {
    finite_diff_check_guarded(|t| (f(t), Vec::new()), x, analytic, eps).max_rel_error
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

/// Finite-difference check that skips coordinates where `f`'s piecewise
/// signature (for example a ReLU sign pattern) differs between the two
/// perturbed evaluations and the base point.
pub fn finite_diff_check_guarded(
    f: impl Fn(&Tensor) -> (f64, Vec<u64>),
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> GradCheckReport {
    assert!(eps > 0.0, "finite difference step must be positive");
    assert_eq!(x.shape(), analytic.shape());
    let (_, base_sig) = f(x);
    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (fp, sp) = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let (fm, sm) = f(&probe);
        probe.data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        let analytic = Tensor::from_f64(vec![1], &[6.0]).unwrap();
        let err = finite_diff_check(|t| t.data()[0] * t.data()[0], &x, &analytic, 1e-5);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn relu_sum_away_from_kinks() {
        let x = Tensor::from_f64(vec![4], &[-0.7, 0.3, 1.2, -2.0]).unwrap();
        let f = |t: &Tensor| {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(t.clone());
            let r = tape.relu(v);
            let s = tape.sum_all(r).unwrap();
            tape.value(s).item()
        };
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone());
        let r = tape.relu(v);
        let s = tape.sum_all(r).unwrap();
        tape.backward(s).unwrap();
        let err = finite_diff_check(f, &x, tape.grad(v).unwrap(), 1e-5);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let zero = Tensor::zeros(&[3]);
        assert_eq!(finite_diff_check(|_| 4.2, &x, &zero, 1e-5), 0.0);
    }

    #[test]
    fn guard_skips_kink_crossings() {
        // x = 0 sits on the ReLU kink; the guard must skip it
        let x = Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap();
        let f = |t: &Tensor| {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(t.clone());
            let r = tape.relu(v);
            let s = tape.sum_all(r).unwrap();
            (tape.value(s).item(), tape.kink_signature())
        };
        let analytic = Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap();
        let report = finite_diff_check_guarded(f, &x, &analytic, 1e-5);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }
}
