//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// Anything with parameters and a scalar objective that can report its own
/// gradient.
pub trait Differentiable {
    /// Evaluates the objective at the current parameter values. When
    /// `with_grad` is set the analytic gradient is accumulated into each
    /// parameter's `grad` (callers zero the gradients first).
    fn evaluate(&mut self, with_grad: bool) -> Result<f64>;

    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares analytic gradients with central differences over every entry
/// of every parameter. The per-entry error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<D: Differentiable + ?Sized>(model: &mut D, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Input(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    for p in model.parameters_mut() {
        p.zero_grad();
    }
    let base = model.evaluate(true)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("objective is {base} at the base point")));
    }
    let analytic: Vec<(String, Vec<f64>)> = model
        .parameters_mut()
        .into_iter()
        .map(|p| (p.id.clone(), p.grad.data().to_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for (pi, (id, grads)) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let original = model.parameters_mut()[pi].value.data()[i];
            model.parameters_mut()[pi].value.data_mut()[i] = original + eps;
            let plus = model.evaluate(false)?;
            model.parameters_mut()[pi].value.data_mut()[i] = original - eps;
            let minus = model.evaluate(false)?;
            model.parameters_mut()[pi].value.data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite when perturbing {id}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = g.abs().max(numeric.abs()).max(1e-8);
            let rel = (g - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = id.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Scalar<F: Fn(f64) -> (f64, f64)> {
        p: Parameter,
        f: F,
    }

    impl<F: Fn(f64) -> (f64, f64)> Differentiable for Scalar<F> {
        fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
            let (v, g) = (self.f)(self.p.value.data()[0]);
            if with_grad {
                self.p.grad.data_mut()[0] += g;
            }
            Ok(v)
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.p]
        }
    }

    fn scalar<F: Fn(f64) -> (f64, f64)>(w: f64, f: F) -> Scalar<F> {
        Scalar {
            p: Parameter::new("w", Tensor::full(&[1], w), false),
            f,
        }
    }

    #[test]
    fn quadratic() {
        let mut m = scalar(3.0, |w| (w * w, 2.0 * w));
        let r = grad_check(&mut m, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(m.p.grad.data()[0], 6.0);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut m = scalar(1.0, |_| (4.0, 0.0));
        let r = grad_check(&mut m, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(m.p.grad.data()[0], 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut m = scalar(3.0, |w| (w * w, 3.0 * w));
        assert!(grad_check(&mut m, 1e-5).unwrap().max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut m = scalar(0.0, |w| (1.0 / w, 0.0));
        assert!(matches!(grad_check(&mut m, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn eps_out_of_range() {
        let mut m = scalar(0.0, |w| (w, 1.0));
        assert!(grad_check(&mut m, 0.1).is_err());
        assert!(grad_check(&mut m, 0.0).is_err());
    }
}
