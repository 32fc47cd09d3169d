//! Central finite-difference gradient checking.
//!
//! The checker treats the function under test as a black box mapping a set
//! of input tensors to a scalar. The analytic side comes from whatever the
//! caller supplies (usually [`Graph::backward`](crate::autodiff::Graph::backward)),
//! so the two routes never share code.

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Differences below this magnitude pass regardless of `rel_tol`.
    pub abs_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &FdReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Relative error with the `abs_floor` guard used throughout the checker.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Central differences of `f` around `inputs`, one coordinate at a time.
pub fn numeric_gradient<F>(inputs: &[Tensor], step: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares `analytic` against central differences of `f`.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    analytic: &[Tensor],
    cfg: FdConfig,
    f: F,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let numeric = numeric_gradient(inputs, cfg.step, f)?;
    let mut report = FdReport::default();
    for (t, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_err(av, nv, cfg.abs_floor);
            report.checked += 1;
            if e > cfg.rel_tol {
                report.failures += 1;
            }
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((t, i, av, nv));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let f = |xs: &[Tensor]| Ok(xs[0].data().iter().map(|v| v * v * v).sum::<f64>());
        let analytic = vec![x.map(|v| 3.0 * v * v)];
        let r = check_gradients(&[x], &analytic, FdConfig::default(), f).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |xs: &[Tensor]| Ok(xs[0].norm_sq());
        let wrong = vec![x.map(|v| v)];
        let r = check_gradients(&[x], &wrong, FdConfig::default(), f).unwrap();
        assert_eq!(r.failures, 2);
    }
}
