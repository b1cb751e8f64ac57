//! Central finite-difference gradient checking (64-bit).

use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::PortableRng;

/// Outcome of one finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the loss builder itself failed; the check then fails
    /// without panicking.
    pub error: Option<String>,
}

impl GradCheckReport {
    fn failed(name: &str, tolerance: f64, msg: String) -> Self {
        GradCheckReport {
            name: name.to_string(),
            probes: 0,
            max_rel_err: f64::INFINITY,
            tolerance,
            passed: false,
            error: Some(msg),
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.error {
            Some(e) => write!(f, "{}: ERROR ({e})", self.name),
            None => write!(
                f,
                "{}: max rel err {:.3e} over {} probes ({})",
                self.name,
                self.max_rel_err,
                self.probes,
                if self.passed { "pass" } else { "FAIL" }
            ),
        }
    }
}

/// Compares analytic gradients of `build` (a scalar loss over `params`)
/// against central differences at `probes` randomly chosen parameter
/// entries. Relative error uses `max(|analytic|, |numeric|, 1e-3)` as the
/// denominator so near-zero gradients are judged absolutely.
pub fn gradcheck<F>(
    name: &str,
    params: &mut [Tensor<f64>],
    build: F,
    probes: usize,
    fd_step: f64,
    tolerance: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let analytic: Vec<Vec<f64>> = {
        for p in params.iter() {
            p.zero_grad();
        }
        let loss = match build(params) {
            Ok(l) => l,
            Err(e) => return GradCheckReport::failed(name, tolerance, e.to_string()),
        };
        if let Err(e) = loss.backward() {
            return GradCheckReport::failed(name, tolerance, e.to_string());
        }
        params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    };

    let mut rng = PortableRng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let pi = rng.range_usize(0, params.len() - 1);
        let ei = rng.range_usize(0, params[pi].numel() - 1);
        let orig = params[pi].data()[ei];

        params[pi].data_mut()[ei] = orig + fd_step;
        let plus = match build(params) {
            Ok(l) => l.item(),
            Err(e) => return GradCheckReport::failed(name, tolerance, e.to_string()),
        };
        params[pi].data_mut()[ei] = orig - fd_step;
        let minus = match build(params) {
            Ok(l) => l.item(),
            Err(e) => return GradCheckReport::failed(name, tolerance, e.to_string()),
        };
        params[pi].data_mut()[ei] = orig;

        let numeric = (plus - minus) / (2.0 * fd_step);
        let a = analytic[pi][ei];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
        }
    }

    GradCheckReport {
        name: name.to_string(),
        probes,
        max_rel_err: max_rel,
        tolerance,
        passed: max_rel < tolerance,
        error: None,
    }
}
