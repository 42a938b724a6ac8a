//! Finite-difference gradient checker.
//!
//! Compares the tape's analytic gradient against central differences for
//! every element of every parameter. Stop-gradient values captured on the
//! base evaluation are replayed on every perturbed evaluation, so the oracle
//! differentiates the same surrogate the tape does.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub violations: Vec<Violation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub tol: f64,
    pub step: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: 1e-5,
        }
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    /// Checks `f` at `params`. The error metric per element is
    /// `|analytic − numeric| / max(1, |numeric|)`.
    pub fn run<F>(&self, params: &ParamStore<f64>, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        let base = g.value(loss).item();
        if !base.is_finite() {
            return Err(Error::NonFinite("grad_check base loss".into()));
        }
        let grads = g.backward(loss)?;
        let detached = g.detached_values();

        let eval = |p: &ParamStore<f64>| -> Result<f64> {
            let mut g = Graph::replaying(detached.clone());
            let l = f(&mut g, p)?;
            let v = g.value(l).item();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite("grad_check perturbed loss".into()))
            }
        };

        let mut probe = params.clone();
        let mut report = GradCheckReport::default();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let n = params.get(&name).map(|t| t.len()).unwrap_or(0);
            let analytic = grads.param(&name);
            for i in 0..n {
                let orig = params.get(&name).unwrap().data()[i];
                probe.get_mut(&name).unwrap().data_mut()[i] = orig + self.step;
                let plus = eval(&probe)?;
                probe.get_mut(&name).unwrap().data_mut()[i] = orig - self.step;
                let minus = eval(&probe)?;
                probe.get_mut(&name).unwrap().data_mut()[i] = orig;

                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic.map(|t| t.data()[i]).unwrap_or(0.0);
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                report.checked += 1;
                report.max_error = report.max_error.max(err);
                if err > self.tol {
                    report.violations.push(Violation {
                        param: name.clone(),
                        index: i,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let report = GradCheck::default()
            .run(&ps, |g, p| {
                let _ = g.param(p, "w")?;
                let c = g.input(Tensor::scalar(3.0))?;
                g.sum(c)
            })
            .unwrap();
        assert!(report.passed());
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_backward_is_reported() {
        // value is sum(w²) but the tape's path carries -w instead of 2w
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap())
            .unwrap();
        let report = GradCheck::default()
            .run(&ps, |g, p| {
                let w = g.param(p, "w")?;
                let c = g.input(p.get("w").unwrap().clone())?;
                let y = g.mul(w, c)?;
                let neg = g.scale(y, -1.0)?;
                let frozen = g.input(g.value(y).map(|v| 2.0 * v))?;
                let out = g.add(neg, frozen)?;
                g.sum(out)
            })
            .unwrap();
        assert!(!report.passed());
        assert_eq!(report.violations.len(), 2);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::scalar(1.0)).unwrap();
        let err = GradCheck::default()
            .run(&ps, |g, p| {
                let _ = g.param(p, "w")?;
                g.input(Tensor::scalar(f64::NAN))
            })
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
