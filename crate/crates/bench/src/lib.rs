//! Fixtures shared by the benchmarks.

use homlab_core::field::{CoefficientParams, CoefficientSampler};
use homlab_core::{CoefficientSet, CovarianceSpec, GridSpec};

/// Squared-exponential coefficient sampler with `λ = 4`, `K = 0.5`.
pub fn sampler(d: usize, n: usize, eps: f64) -> CoefficientSampler {
    let grid = GridSpec::unit(d, n).expect("grid");
    let cov = CovarianceSpec::squared_exponential(eps).expect("covariance");
    CoefficientSampler::new(cov, &grid, CoefficientParams::minimal(d, 4.0, 0.5), 7, 0).expect("sampler")
}

pub fn coefficients(d: usize, n: usize, eps: f64) -> CoefficientSet {
    sampler(d, n, eps).sample(0).expect("coefficients")
}
