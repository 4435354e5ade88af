//! Homogenized coefficients by space-then-ensemble averaging, and the drift
//! fluctuation fields `Γ_i = b·(e_i + grad φ_i) - b̄_i`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{ScalarField, SolveOptions, VectorField};
use crate::corrector::{flux_mean, solve_corrector, CorrectorSet};
use crate::error::{HomlabError, Result};
use crate::field::{CoefficientSampler, CoefficientSet};
use crate::stats::{symmetric_eigenvalues, Estimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedCoefficients {
    /// `a_bar[j][i] = (ā e_i)_j`.
    pub a_bar: Vec<Vec<f64>>,
    pub b_bar: Vec<f64>,
    pub a_std_err: Vec<Vec<f64>>,
    pub b_std_err: Vec<f64>,
    pub n_samples: usize,
    pub excluded: usize,
}

impl HomogenizedCoefficients {
    /// Deterministic coefficients with zero error bars.
    pub fn exact(a_bar: Vec<Vec<f64>>, b_bar: Vec<f64>) -> Self {
        let d = b_bar.len();
        HomogenizedCoefficients {
            a_bar,
            b_bar,
            a_std_err: vec![vec![0.0; d]; d],
            b_std_err: vec![0.0; d],
            n_samples: 1,
            excluded: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.b_bar.len()
    }

    /// Column `ā e_i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.d()).map(|j| self.a_bar[j][i]).collect()
    }

    /// `max |ā_jk - ā_kj|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.d();
        let mut m = 0.0f64;
        for j in 0..d {
            for k in 0..d {
                m = m.max((self.a_bar[j][k] - self.a_bar[k][j]).abs());
            }
        }
        m
    }

    /// Largest standard error over all entries of `ā`.
    pub fn max_a_std_err(&self) -> f64 {
        self.a_std_err.iter().flatten().fold(0.0f64, |m, v| m.max(*v))
    }

    /// Eigenvalues of `(ā + āᵀ)/2`, ascending.
    pub fn symmetric_spectrum(&self) -> Vec<f64> {
        let d = self.d();
        let sym: Vec<Vec<f64>> = (0..d)
            .map(|j| (0..d).map(|k| 0.5 * (self.a_bar[j][k] + self.a_bar[k][j])).collect())
            .collect();
        symmetric_eigenvalues(&sym)
    }

    /// Asymmetry within `2 se` and symmetrized spectrum inside
    /// `[1 - 2 se, λ + 2 se]`, with `se` the largest entry error.
    pub fn is_admissible(&self, lambda: f64) -> bool {
        let se = self.max_a_std_err();
        let spec = self.symmetric_spectrum();
        self.asymmetry() <= 2.0 * se + 1e-12
            && spec.first().is_some_and(|&l| l >= 1.0 - 2.0 * se - 1e-12)
            && spec.last().is_some_and(|&l| l <= lambda + 2.0 * se + 1e-12)
    }
}

/// Spatial averages of one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAverages {
    pub index: usize,
    pub seed: u64,
    /// `a_cols[i][j] = ⨏ a (e_i + grad φ_i)_j`.
    pub a_cols: Vec<Vec<f64>>,
    /// `b_vals[i] = ⨏ b·(e_i + grad φ_i)`.
    pub b_vals: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// `b·(e_i + grad φ_i)` on cells, with `grad φ_i` averaged from faces.
pub fn drift_flux(coef: &CoefficientSet, i: usize, grad_phi: &VectorField) -> Vec<f64> {
    let cells = grad_phi.to_cells();
    let g = &coef.grid;
    (0..g.cells())
        .map(|lin| {
            (0..g.d())
                .map(|j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    coef.b[j][lin] * (delta + cells[j][lin])
                })
                .sum()
        })
        .collect()
}

/// Spatial averages for one realization (solves the `d` correctors).
pub fn sample_averages(coef: &CoefficientSet, index: usize, seed: u64, opts: &SolveOptions) -> Result<SampleAverages> {
    let d = coef.grid.d();
    let mut a_cols = Vec::with_capacity(d);
    let mut b_vals = Vec::with_capacity(d);
    let mut iterations = Vec::with_capacity(d);
    for i in 0..d {
        let sol = solve_corrector(coef, i, None, opts)?;
        a_cols.push(flux_mean(coef, i, &sol.grad_phi));
        let bf = drift_flux(coef, i, &sol.grad_phi);
        b_vals.push(bf.iter().sum::<f64>() / bf.len() as f64);
        iterations.push(sol.iterations);
    }
    Ok(SampleAverages { index, seed, a_cols, b_vals, iterations })
}

/// Ensemble mean and standard error of per-sample spatial averages, reduced
/// in sample order.
pub fn aggregate(samples: &[SampleAverages], excluded: usize) -> Result<HomogenizedCoefficients> {
    let Some(first) = samples.first() else {
        return Err(HomlabError::invalid("no samples to aggregate"));
    };
    let d = first.b_vals.len();
    let mut a_bar = vec![vec![0.0; d]; d];
    let mut a_std_err = vec![vec![0.0; d]; d];
    for j in 0..d {
        for i in 0..d {
            let xs: Vec<f64> = samples.iter().map(|s| s.a_cols[i][j]).collect();
            let e = Estimate::from_samples(&xs);
            a_bar[j][i] = e.mean;
            a_std_err[j][i] = if samples.len() > 1 { e.std_err } else { 0.0 };
        }
    }
    let mut b_bar = vec![0.0; d];
    let mut b_std_err = vec![0.0; d];
    for i in 0..d {
        let xs: Vec<f64> = samples.iter().map(|s| s.b_vals[i]).collect();
        let e = Estimate::from_samples(&xs);
        b_bar[i] = e.mean;
        b_std_err[i] = if samples.len() > 1 { e.std_err } else { 0.0 };
    }
    Ok(HomogenizedCoefficients { a_bar, b_bar, a_std_err, b_std_err, n_samples: samples.len(), excluded })
}

/// Monte Carlo estimate over `m` samples of the sampler. Failed samples are
/// excluded; more than 10% exclusions reject the run.
pub fn estimate_homogenized(
    sampler: &CoefficientSampler,
    m: usize,
    opts: &SolveOptions,
) -> Result<(HomogenizedCoefficients, Vec<SampleAverages>)> {
    estimate_homogenized_by(m, |idx| Ok((sampler.sample(idx)?, sampler.seed(idx))), opts)
}

/// As [`estimate_homogenized`] for any indexed source of `(coefficients, seed)`.
pub fn estimate_homogenized_by(
    m: usize,
    source: impl Fn(usize) -> Result<(CoefficientSet, u64)> + Sync,
    opts: &SolveOptions,
) -> Result<(HomogenizedCoefficients, Vec<SampleAverages>)> {
    if m < 2 {
        return Err(HomlabError::invalid(format!("need at least 2 samples, got {m}")));
    }
    let results: Vec<Result<SampleAverages>> = (0..m)
        .into_par_iter()
        .map(|idx| {
            let (coef, seed) = source(idx)?;
            sample_averages(&coef, idx, seed, opts)
        })
        .collect();
    let mut kept = Vec::with_capacity(m);
    let mut excluded = 0;
    for r in results {
        match r {
            Ok(s) => kept.push(s),
            Err(_) => excluded += 1,
        }
    }
    if excluded * 10 > m {
        return Err(HomlabError::TooManyExcluded { excluded, total: m });
    }
    let hc = aggregate(&kept, excluded)?;
    Ok((hc, kept))
}

/// Deterministic coefficient field (e.g. a laminate): one realization, no error bars.
pub fn homogenize_single(coef: &CoefficientSet, opts: &SolveOptions) -> Result<HomogenizedCoefficients> {
    let s = sample_averages(coef, 0, 0, opts)?;
    let mut hc = aggregate(&[s], 0)?;
    hc.n_samples = 1;
    Ok(hc)
}

/// Harmonic and arithmetic means of `a` over the `i`-faces: the
/// Reuss and Voigt bounds for `ā_ii`.
pub fn voigt_reuss_bounds(coef: &CoefficientSet, i: usize) -> (f64, f64) {
    let faces = &coef.a[i];
    let n = faces.len() as f64;
    let harmonic = n / faces.iter().map(|a| 1.0 / a).sum::<f64>();
    let arithmetic = faces.iter().sum::<f64>() / n;
    (harmonic, arithmetic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaField {
    pub gamma: Vec<ScalarField>,
    pub seed: u64,
    /// Largest Euclidean norm of the cell-averaged corrector gradient.
    pub grad_phi_max: f64,
}

pub fn gamma_field(coef: &CoefficientSet, set: &CorrectorSet, b_bar: &[f64], seed: u64) -> Result<GammaField> {
    coef.grid.ensure_same(&set.grid)?;
    let gamma = (0..coef.grid.d())
        .map(|i| {
            let values = drift_flux(coef, i, &set.grad_phi[i]).into_iter().map(|v| v - b_bar[i]).collect();
            ScalarField { grid: coef.grid, values }
        })
        .collect();
    Ok(GammaField { gamma, seed, grad_phi_max: set.max_grad_phi() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaL2Report {
    /// `ratios[s][i] = ‖Γ_i ∂_i u₀‖ / ‖grad u₀‖` for sample `s`.
    pub ratios: Vec<Vec<f64>>,
    pub mean_ratio: Vec<f64>,
    /// `2K (1 + max ‖grad φ‖_∞)` over the ensemble.
    pub bound: f64,
    pub holds: bool,
}

/// Per-direction `L²` ratios of `Γ_i ∂_i u₀` against `grad u₀`, compared with
/// the pointwise drift bound. `du0[i]` holds `∂_i u₀` at cells.
pub fn gamma_l2_bound_check(ensemble: &[GammaField], du0: &[Vec<f64>], drift_bound: f64) -> Result<GammaL2Report> {
    if ensemble.len() < 8 {
        return Err(HomlabError::invalid(format!("need at least 8 samples, got {}", ensemble.len())));
    }
    let d = du0.len();
    let grad_norm2: f64 = du0.iter().flatten().map(|v| v * v).sum();
    if grad_norm2 == 0.0 {
        return Err(HomlabError::Degenerate("grad u0 vanishes identically".into()));
    }
    let ratios: Vec<Vec<f64>> = ensemble
        .iter()
        .map(|gf| {
            (0..d)
                .map(|i| {
                    let s: f64 = gf.gamma[i].values.iter().zip(&du0[i]).map(|(g, u)| (g * u).powi(2)).sum();
                    (s / grad_norm2).sqrt()
                })
                .collect()
        })
        .collect();
    let mean_ratio: Vec<f64> = (0..d)
        .map(|i| ratios.iter().map(|r| r[i]).sum::<f64>() / ratios.len() as f64)
        .collect();
    let gmax = ensemble.iter().map(|g| g.grad_phi_max).fold(0.0, f64::max);
    let bound = 2.0 * drift_bound * (1.0 + gmax);
    let holds = mean_ratio.iter().all(|&r| r <= bound);
    Ok(GammaL2Report { ratios, mean_ratio, bound, holds })
}
