//! Central finite differences against reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Perturbation applied on each side of a scalar.
pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(+h) - f(-h)) / 2h` where `eval(delta)` evaluates at the offset point.
pub fn central_difference(step: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let plus = eval(step)?;
    let minus = eval(-step)?;
    Ok((plus - minus) / (2.0 * step))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }

    /// Merges another report for the same op, keeping the worst error.
    pub fn absorb(&mut self, other: &GradReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
    }
}

/// Which scalars of each input get perturbed.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// Up to this many randomly chosen scalars per input.
    Sample { per_input: usize, seed: u64 },
}

impl Coverage {
    fn pick(&self, n: usize, input: usize) -> Vec<usize> {
        match *self {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_input, seed } if per_input < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(input as u64));
                let mut v = sample(&mut rng, n, per_input).into_vec();
                v.sort_unstable();
                v
            }
            Coverage::Sample { .. } => (0..n).collect(),
        }
    }
}

/// Compares the reverse-mode gradient of a scalar function of `inputs`
/// against central differences.
///
/// `f` must return a one-element tensor and must be a pure function of the
/// input values.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    tolerance: f64,
    coverage: Coverage,
) -> Result<GradReport> {
    let vars: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::variable(t.shape(), t.to_vec()))
        .collect::<Result<_>>()?;
    f(&vars)?.backward()?;

    let mut report = GradReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        tolerance,
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = var.grad_vec().unwrap_or_else(|| vec![0.0; var.numel()]);
        for idx in coverage.pick(var.numel(), i) {
            let numeric = central_difference(FD_STEP, |delta| {
                let shifted: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j != i {
                            return Ok(t.detach());
                        }
                        let mut v = t.to_vec();
                        v[idx] += delta;
                        Tensor::new(t.shape(), v)
                    })
                    .collect::<Result<_>>()?;
                no_grad(|| f(&shifted)).map(|t| t.item())
            })?;
            let err = relative_error(analytic[idx], numeric);
            if err.is_nan() || err > report.max_rel_err {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_passes() {
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let r = check("square", &[x], &|v| Ok(v[0].mul(&v[0])?.sum()), 1e-6, Coverage::All).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn sampled_coverage_is_deterministic() {
        let a = Coverage::Sample { per_input: 5, seed: 9 }.pick(100, 0);
        let b = Coverage::Sample { per_input: 5, seed: 9 }.pick(100, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 1e-9), 1e-6);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
