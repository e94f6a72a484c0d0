//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{config_err, Error, Result};

/// Accepted range for the finite-difference step.
pub const EPS_RANGE: (f64, f64) = (1e-6, 1e-3);

/// Coordinate with the largest disagreement.
#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
///
/// `f` records a forward pass on the graph it is handed, with `params[i]`
/// bound to `vars[i]`, and returns the scalar output. It must be
/// deterministic: it is evaluated `2 · coordinates + 1` times.
pub fn grad_check<F>(params: &mut [Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(config_err!(
            "grad_check eps {eps} outside [{}, {}]",
            EPS_RANGE.0,
            EPS_RANGE.1
        ));
    }

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("grad_check: f = {value}")));
        }
        let grads = g.backward(out)?;
        vars.iter()
            .zip(params.iter())
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    };

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.frozen(p)).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).data()[0];
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numeric(format!("grad_check: f = {value}")))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            params[t].data_mut()[i] = orig + eps;
            let up = eval(params);
            params[t].data_mut()[i] = orig - eps;
            let down = eval(params);
            params[t].data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(WorstCoordinate {
                    tensor: t,
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut params = vec![Tensor::vector(vec![0.5, -1.5, 2.0])];
        let coeffs = Tensor::vector(vec![3.0, -2.0, 0.25]);
        let report = grad_check(&mut params, 1e-4, |g, v| {
            let c = g.constant(coeffs.clone());
            let p = g.mul(v[0], c)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn eps_outside_range_is_a_config_error() {
        let mut params = vec![Tensor::vector(vec![1.0])];
        for eps in [1e-2, 1e-7] {
            let err = grad_check(&mut params, eps, |g, v| g.sum(v[0])).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut params = vec![Tensor::vector(vec![0.7, 1.3])];
        let report = grad_check(&mut params, 1e-5, |g, v| {
            g.inject_backward_fault();
            let r = g.relu(v[0])?;
            g.sum(r)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }
}
