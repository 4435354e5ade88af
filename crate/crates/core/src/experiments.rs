//! Configured pipelines: homogenization-error rate studies on the torus and on
//! the unit cube, and the ensemble sweeps behind each command-line subcommand.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{lp_norm, solve, BoundaryCondition, DirichletData, NormKind, ScalarField, SolveOptions};
use crate::corrector::{moment_diagnostics, solve_corrector, CorrectorMoments, CorrectorSet, MomentReport};
use crate::error::{HomlabError, Result, Warning};
use crate::field::{
    coefficient_map, empirical_covariance, squash, CoefficientParams, CoefficientSampler, CoefficientSet,
    CovarianceKind, CovarianceSpec, GaussianSynthesizer, ParameterField,
};
use crate::grid::{GridSpec, MAX_DIM};
use crate::homog::{drift_flux, estimate_homogenized_by, gamma_field, HomogenizedCoefficients};
use crate::io::{write_field, FieldHeader};
use crate::localize::{
    choose_iota, cube_gradient_energy, cube_statistics, localized_variance_check, CubePartition, LocalizedPoint,
    LocalizedReport,
};
use crate::sgap::{coarse_lattice, spectral_gap_test, CubeMean, Functional, SgapConfig, SpectralGapReport, DEFAULT_STEP};
use crate::stats::{ols, Estimate};
use crate::twoscale::{apply_homogenized, residual_scaling, residuals, MacroFunction, ResidualNorms, ResidualScalingReport, U0Kind};

pub const STREAM_FIELD: u64 = 0;
pub const STREAM_HOMOG: u64 = 1;
pub const STREAM_RATE: u64 = 2;
pub const STREAM_SGAP: u64 = 3;
pub const STREAM_LOCALIZE: u64 = 4;

/// Sub-stream for purpose `purpose` at sweep position `k`.
pub fn stream(purpose: u64, k: usize) -> u64 {
    (purpose << 32) | k as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    Bounded,
    FullspaceProxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroOrderMode {
    /// `Λ = K² + 1`
    Minimal,
    /// `Λ` from the `Lambda` key.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgapSection {
    #[serde(rename = "M")]
    pub samples: usize,
    pub rhs_samples: usize,
    /// Lattice spacing in cells; 0 picks the largest power of two `<= ε/(2h)`.
    pub lattice_spacing: usize,
    pub functionals: usize,
}

impl Default for SgapSection {
    fn default() -> Self {
        SgapSection { samples: 1024, rhs_samples: 4, lattice_spacing: 0, functionals: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssertionConfig {
    /// Defaults to 0.35 (bounded) or 0.45 (full-space proxy).
    pub min_slope: Option<f64>,
    pub monotone: bool,
    /// Largest admissible relative change of the error under `L`-doubling.
    pub max_l_doubling: f64,
}

impl Default for AssertionConfig {
    fn default() -> Self {
        AssertionConfig { min_slope: None, monotone: true, max_l_doubling: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub setting: Setting,
    pub d: usize,
    /// Largest admissible cells per axis.
    pub n: usize,
    #[serde(rename = "L")]
    pub length: f64,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub drift_bound: f64,
    #[serde(rename = "Lambda_mode")]
    pub zero_order_mode: ZeroOrderMode,
    #[serde(rename = "Lambda")]
    pub zero_order: Option<f64>,
    pub drift_direction: Option<Vec<f64>>,
    /// Replaces `a(ω)` by this constant.
    pub fixed_diffusion: Option<f64>,
    pub cov: CovarianceKind,
    pub epsilons: Vec<f64>,
    #[serde(rename = "M")]
    pub samples: usize,
    #[serde(rename = "M_homog")]
    pub homog_samples: usize,
    pub seed: u64,
    /// Defaults to sines (bounded) or the bump (full-space proxy).
    pub u0: Option<U0Kind>,
    /// Cells per correlation length.
    pub resolution: usize,
    pub tol: f64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Corrector regularization; absent for the periodic problem.
    #[serde(rename = "T")]
    pub regularization: Option<f64>,
    /// Cube sides for the localization sweep; absent picks one per `ε`.
    pub iotas: Option<Vec<f64>>,
    /// Whether the full-space proxy reports `L`-doubling sensitivity.
    pub l_doubling: bool,
    pub sgap: SgapSection,
    pub assertions: AssertionConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            setting: Setting::Bounded,
            d: 3,
            n: 128,
            length: 1.0,
            lambda: 4.0,
            drift_bound: 0.5,
            zero_order_mode: ZeroOrderMode::Minimal,
            zero_order: None,
            drift_direction: None,
            fixed_diffusion: None,
            cov: CovarianceKind::SquaredExponential,
            epsilons: vec![0.25, 0.125, 0.0625],
            samples: 8,
            homog_samples: 16,
            seed: 20_240_601,
            u0: None,
            resolution: 8,
            tol: 1e-10,
            workers: 0,
            regularization: None,
            iotas: None,
            l_doubling: true,
            sgap: SgapSection::default(),
            assertions: AssertionConfig::default(),
        }
    }
}

impl LabConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: LabConfig = toml::from_str(text).map_err(|e| HomlabError::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The resolved configuration, defaults included.
    pub fn describe(&self) -> String {
        let mut resolved = self.clone();
        resolved.u0 = Some(self.u0_kind());
        resolved.zero_order = Some(self.coefficient_params().zero_order);
        resolved.assertions.min_slope = Some(self.min_slope());
        toml::to_string_pretty(&resolved).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DIM).contains(&self.d) {
            return Err(HomlabError::invalid(format!("d must be 1, 2 or 3, got {}", self.d)));
        }
        if !self.n.is_power_of_two() || !(self.length > 0.0) {
            return Err(HomlabError::invalid("n must be a power of two and L positive"));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(HomlabError::invalid("epsilons must be a non-empty list in (0, 1]"));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(HomlabError::invalid("epsilons must be strictly decreasing"));
        }
        if self.samples == 0 || self.homog_samples < 2 || self.resolution == 0 {
            return Err(HomlabError::invalid("M >= 1, M_homog >= 2 and resolution >= 1 are required"));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(HomlabError::invalid("tol must lie in (0, 1)"));
        }
        if self.zero_order_mode == ZeroOrderMode::Fixed && self.zero_order.is_none() {
            return Err(HomlabError::invalid("Lambda_mode = \"fixed\" needs a Lambda value"));
        }
        if let Some(a) = self.fixed_diffusion {
            if !(a >= 1.0 && a <= self.lambda) {
                return Err(HomlabError::invalid(format!("fixed_diffusion {a} outside [1, lambda]")));
            }
        }
        self.coefficient_params().validate(self.d)?;
        if self.setting == Setting::FullspaceProxy {
            if self.d < 3 {
                return Err(HomlabError::invalid("the full-space proxy measures the L^(2d/(d-2)) error and needs d = 3"));
            }
            let grid = GridSpec::new(self.d, 8, self.length)?;
            let u0 = MacroFunction::of_kind(self.u0_kind(), &grid, true);
            if u0.support_diameter() > 0.5 * self.length {
                return Err(HomlabError::invalid("the full-space proxy needs u0 supported in a set of diameter <= L/2"));
            }
        }
        Ok(())
    }

    pub fn u0_kind(&self) -> U0Kind {
        self.u0.unwrap_or(match self.setting {
            Setting::Bounded => U0Kind::Sines,
            Setting::FullspaceProxy => U0Kind::Bump,
        })
    }

    pub fn min_slope(&self) -> f64 {
        self.assertions.min_slope.unwrap_or(match self.setting {
            Setting::Bounded => 0.35,
            Setting::FullspaceProxy => 0.45,
        })
    }

    pub fn coefficient_params(&self) -> CoefficientParams {
        let mut p = CoefficientParams::minimal(self.d, self.lambda, self.drift_bound);
        if let Some(v) = &self.drift_direction {
            p.drift_direction = v.clone();
        }
        if self.zero_order_mode == ZeroOrderMode::Fixed {
            if let Some(z) = self.zero_order {
                p.zero_order = z;
            }
        }
        p
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions { tol: self.tol, ..SolveOptions::default() }
    }

    /// Smallest power-of-two grid with `h <= ε / resolution`, at least 8 cells.
    pub fn grid_for(&self, eps: f64) -> Result<GridSpec> {
        let need = (self.resolution as f64 * self.length / eps - 1e-9).ceil().max(8.0) as usize;
        let n = need.next_power_of_two();
        if n > self.n {
            return Err(HomlabError::GridTooCoarse { n: self.n, minimal_n: n });
        }
        GridSpec::new(self.d, n, self.length)
    }

    pub fn ensemble(&self, k: usize, purpose: u64) -> Result<Ensemble> {
        let eps = self.epsilons[k];
        let grid = self.grid_for(eps)?;
        let sampler = CoefficientSampler::new(
            CovarianceSpec::new(self.cov, eps)?,
            &grid,
            self.coefficient_params(),
            self.seed,
            stream(purpose, k),
        )?;
        Ok(Ensemble { epsilon: eps, sampler, fixed_diffusion: self.fixed_diffusion })
    }
}

/// Coefficient samples at one correlation length.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub epsilon: f64,
    pub sampler: CoefficientSampler,
    pub fixed_diffusion: Option<f64>,
}

impl Ensemble {
    pub fn grid(&self) -> GridSpec {
        *self.sampler.grid()
    }

    pub fn seed(&self, idx: usize) -> u64 {
        self.sampler.seed(idx)
    }

    pub fn coefficients_of(&self, omega: &ParameterField) -> Result<CoefficientSet> {
        let mut coef = coefficient_map(omega, &self.sampler.params)?;
        if let Some(a0) = self.fixed_diffusion {
            coef.a.iter_mut().flatten().for_each(|v| *v = a0);
        }
        Ok(coef)
    }

    pub fn coefficients(&self, idx: usize) -> Result<CoefficientSet> {
        self.coefficients_of(&self.sampler.parameter_field(idx))
    }

    pub fn homogenized(&self, m: usize, opts: &SolveOptions) -> Result<HomogenizedCoefficients> {
        Ok(estimate_homogenized_by(m, |idx| Ok((self.coefficients(idx)?, self.seed(idx))), opts)?.0)
    }
}

/// `ā`, `b̄` at sweep position `k` from `M_homog` samples of their own stream.
pub fn homogenized_for(cfg: &LabConfig, k: usize) -> Result<HomogenizedCoefficients> {
    cfg.ensemble(k, STREAM_HOMOG)?.homogenized(cfg.homog_samples, &cfg.solve_options())
}

pub fn homogenized_all(cfg: &LabConfig) -> Result<Vec<HomogenizedCoefficients>> {
    (0..cfg.epsilons.len()).map(|k| homogenized_for(cfg, k)).collect()
}

/// Runs `f` on a pool of `workers` threads (0: all cores).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HomlabError::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Jackknife standard error from the leave-one-out slopes.
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Least squares on `(log ε, log error)` with a leave-one-out 95% interval.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(HomlabError::invalid(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(e, v)) = points.iter().find(|&&(e, v)| !(v > 0.0) || !(e > 0.0)) {
        return Err(HomlabError::invalid(format!("non-positive point ({e}, {v})")));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let full = ols(&lx, &ly).ok_or_else(|| HomlabError::Degenerate("epsilon values coincide".into()))?;
    let m = points.len();
    let loo: Vec<f64> = (0..m)
        .filter_map(|drop| {
            let x: Vec<f64> = lx.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, v)| *v).collect();
            let y: Vec<f64> = ly.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, v)| *v).collect();
            ols(&x, &y).map(|f| f.slope)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / loo.len() as f64;
    let k = loo.len() as f64;
    let std_err = ((k - 1.0) / k * loo.iter().map(|s| (s - mean).powi(2)).sum::<f64>()).sqrt();
    Ok(SlopeFit {
        slope: full.slope,
        intercept: full.intercept,
        r_squared: full.r_squared,
        std_err,
        ci_low: full.slope - 1.96 * std_err,
        ci_high: full.slope + 1.96 * std_err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub epsilon: f64,
    pub sample: usize,
    pub seed: u64,
    /// Error in the norm of the setting.
    pub error: f64,
    pub l2_error: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub epsilon: f64,
    pub n: usize,
    pub error: Estimate,
    pub l2_error: Estimate,
    pub a_bar: Vec<Vec<f64>>,
    pub b_bar: Vec<f64>,
    pub samples: Vec<SampleError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LDoubling {
    pub epsilon: f64,
    pub error_l: f64,
    pub error_2l: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl AssertionOutcome {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        AssertionOutcome { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub setting: Setting,
    pub d: usize,
    pub norm: String,
    pub theoretical_exponent: f64,
    /// False for runs below the dimension the rate statements cover.
    pub rate_regime: bool,
    pub points: Vec<RatePoint>,
    pub slope: Option<SlopeFit>,
    pub monotone: bool,
    pub holder_ok: bool,
    pub l_doubling: Option<LDoubling>,
    pub warnings: Vec<Warning>,
    pub assertions: Vec<AssertionOutcome>,
}

impl RateReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

fn setting_norm(setting: Setting) -> NormKind {
    match setting {
        Setting::Bounded => NormKind::L2,
        Setting::FullspaceProxy => NormKind::Critical,
    }
}

/// Error of one heterogeneous solve against `u₀`, with `f = Ā_h u₀`.
fn rate_error(
    coef: &CoefficientSet,
    hc: &HomogenizedCoefficients,
    u0: &MacroFunction,
    setting: Setting,
    opts: &SolveOptions,
) -> Result<(f64, f64, usize, Vec<Warning>)> {
    let g = coef.grid;
    let periodic = setting == Setting::FullspaceProxy;
    let bc = if periodic {
        BoundaryCondition::Periodic
    } else {
        BoundaryCondition::Dirichlet(DirichletData::from_fn(&g, |x| u0.value(x))?)
    };
    let f = apply_homogenized(hc, coef.zero_order, u0, &g, periodic);
    let sol = solve(coef, &f, &bc, opts)?;
    let exact = u0.sample(&g);
    let diff: Vec<f64> = sol.u.values.iter().zip(&exact.values).map(|(a, b)| a - b).collect();
    let p = setting_norm(setting).exponent(g.d())?;
    Ok((lp_norm(&g, &diff, p), lp_norm(&g, &diff, 2.0), sol.iterations, sol.warnings))
}

pub fn run_rate(cfg: &LabConfig) -> Result<RateReport> {
    let hcs = homogenized_all(cfg)?;
    run_rate_with(cfg, &hcs)
}

/// Rate study given the homogenized coefficients at each `ε`.
pub fn run_rate_with(cfg: &LabConfig, hcs: &[HomogenizedCoefficients]) -> Result<RateReport> {
    cfg.validate()?;
    if hcs.len() != cfg.epsilons.len() {
        return Err(HomlabError::invalid("one set of homogenized coefficients per epsilon is required"));
    }
    let setting = cfg.setting;
    let periodic = setting == Setting::FullspaceProxy;
    let opts = cfg.solve_options();
    let d = cfg.d;
    let mut points = Vec::with_capacity(cfg.epsilons.len());
    let mut warnings = Vec::new();
    let mut holder_ok = true;
    let mut l_doubling = None;
    for (k, hc) in hcs.iter().enumerate() {
        let ens = cfg.ensemble(k, STREAM_RATE)?;
        let grid = ens.grid();
        let u0 = MacroFunction::of_kind(cfg.u0_kind(), &grid, periodic);
        let runs = (0..cfg.samples)
            .into_par_iter()
            .map(|s| {
                let coef = ens.coefficients(s)?;
                rate_error(&coef, hc, &u0, setting, &opts)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let p = setting_norm(setting).exponent(d)?;
        let vol_factor = grid.volume().powf(0.5 - 1.0 / p);
        let mut samples = Vec::with_capacity(runs.len());
        for (s, (error, l2_error, iterations, w)) in runs.into_iter().enumerate() {
            holder_ok &= l2_error <= vol_factor * error * (1.0 + 1e-12);
            for wi in w {
                if !warnings.contains(&wi) {
                    warnings.push(wi);
                }
            }
            samples.push(SampleError { epsilon: ens.epsilon, sample: s, seed: ens.seed(s), error, l2_error, iterations });
        }
        if periodic && cfg.l_doubling && k == 0 {
            l_doubling = Some(l_doubling_check(cfg, &ens, hc, &samples, &opts)?);
        }
        points.push(RatePoint {
            epsilon: ens.epsilon,
            n: grid.n(),
            error: Estimate::from_samples(&samples.iter().map(|s| s.error).collect::<Vec<_>>()),
            l2_error: Estimate::from_samples(&samples.iter().map(|s| s.l2_error).collect::<Vec<_>>()),
            a_bar: hc.a_bar.clone(),
            b_bar: hc.b_bar.clone(),
            samples,
        });
    }
    let monotone = points.windows(2).all(|w| w[1].error.mean < w[0].error.mean);
    let slope = if points.len() >= 3 && points.iter().all(|p| p.error.mean > 0.0) {
        Some(fit_slope(&points.iter().map(|p| (p.epsilon, p.error.mean)).collect::<Vec<_>>())?)
    } else {
        None
    };
    let theoretical_exponent = match setting {
        Setting::Bounded => 0.5,
        Setting::FullspaceProxy => d as f64 / (d as f64 + 2.0),
    };
    let mut assertions = Vec::new();
    let min_slope = cfg.min_slope();
    assertions.push(match &slope {
        Some(f) => AssertionOutcome::new("slope", f.slope >= min_slope, format!("fitted slope {:.4} vs floor {min_slope}", f.slope)),
        None => AssertionOutcome::new("slope", false, "fewer than 3 positive points"),
    });
    if cfg.assertions.monotone {
        let errs: Vec<String> = points.iter().map(|p| format!("{:.4e}", p.error.mean)).collect();
        assertions.push(AssertionOutcome::new("monotone", monotone, format!("mean errors {}", errs.join(", "))));
    }
    assertions.push(AssertionOutcome::new("holder", holder_ok, "L2 error bounded by the setting norm times the volume factor"));
    if let Some(ld) = &l_doubling {
        assertions.push(AssertionOutcome::new(
            "l-doubling",
            ld.relative_change < cfg.assertions.max_l_doubling,
            format!("relative change {:.4} at eps = {}", ld.relative_change, ld.epsilon),
        ));
    }
    Ok(RateReport {
        setting,
        d,
        norm: setting_norm(setting).label(d),
        theoretical_exponent,
        rate_regime: d >= 3,
        points,
        slope,
        monotone,
        holder_ok,
        l_doubling,
        warnings,
        assertions,
    })
}

/// Repeats the full-space solves on the periodically doubled domain with the
/// same `u₀`; the relative change of the mean error measures truncation.
fn l_doubling_check(
    cfg: &LabConfig,
    ens: &Ensemble,
    hc: &HomogenizedCoefficients,
    base: &[SampleError],
    opts: &SolveOptions,
) -> Result<LDoubling> {
    let grid = ens.grid();
    let big_l = 2.0 * grid.length();
    let u0 = match MacroFunction::of_kind(cfg.u0_kind(), &grid, true) {
        MacroFunction::Bump { d, center, radius, .. } => MacroFunction::Bump { d, center, radius, period: Some(big_l) },
        other => other,
    };
    let errors = (0..base.len())
        .into_par_iter()
        .map(|s| {
            let coef = ens.coefficients(s)?.tile(2)?;
            rate_error(&coef, hc, &u0, Setting::FullspaceProxy, opts).map(|r| r.0)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let error_l = base.iter().map(|s| s.error).sum::<f64>() / base.len() as f64;
    let error_2l = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(LDoubling { epsilon: ens.epsilon, error_l, error_2l, relative_change: (error_2l - error_l).abs() / error_l })
}

/// Per-sample corrector moments and two-scale residual norms at one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectorSweepPoint {
    pub epsilon: f64,
    pub n: usize,
    pub moments: Vec<CorrectorMoments>,
    pub residuals: Vec<ResidualNorms>,
    pub iterations: Vec<Vec<usize>>,
}

/// Solves the corrector set on the first `M` samples of the homogenization
/// stream, using the ensemble `ā` for the fluxes.
pub fn corrector_sweep_point(cfg: &LabConfig, k: usize, hc: &HomogenizedCoefficients) -> Result<CorrectorSweepPoint> {
    let ens = cfg.ensemble(k, STREAM_HOMOG)?;
    let grid = ens.grid();
    let opts = cfg.solve_options();
    let cols: Vec<Vec<f64>> = (0..cfg.d).map(|i| hc.column(i)).collect();
    let u0 = MacroFunction::of_kind(cfg.u0_kind(), &grid, true);
    let per = (0..cfg.samples)
        .into_par_iter()
        .map(|s| {
            let coef = ens.coefficients(s)?;
            let set = CorrectorSet::compute(&coef, Some(&cols), cfg.regularization, &opts)?;
            let gamma = gamma_field(&coef, &set, &hc.b_bar, ens.seed(s))?;
            let res = residuals(&coef, &set, &gamma, &u0, hc)?;
            Ok((set.moments(), res.norms, set.iterations.clone()))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut point = CorrectorSweepPoint { epsilon: ens.epsilon, n: grid.n(), moments: vec![], residuals: vec![], iterations: vec![] };
    for (m, r, it) in per {
        point.moments.push(m);
        point.residuals.push(r);
        point.iterations.push(it);
    }
    Ok(point)
}

pub fn moment_report(points: &[CorrectorSweepPoint]) -> Result<MomentReport> {
    moment_diagnostics(&points.iter().map(|p| (p.epsilon, p.moments.clone())).collect::<Vec<_>>())
}

pub fn residual_report(points: &[CorrectorSweepPoint]) -> Result<ResidualScalingReport> {
    residual_scaling(&points.iter().map(|p| (p.epsilon, p.residuals.clone())).collect::<Vec<_>>())
}

/// Cube means of `Σ_i Γ_i ∂_i u₀` over `M` samples of the localization stream.
pub fn localize_point(cfg: &LabConfig, k: usize, iota: Option<f64>, hc: &HomogenizedCoefficients) -> Result<LocalizedPoint> {
    let ens = cfg.ensemble(k, STREAM_LOCALIZE)?;
    let grid = ens.grid();
    let choice = choose_iota(ens.epsilon, &grid)?;
    let part = match iota {
        Some(i) => {
            let mut p = CubePartition::new(&grid, i)?;
            p.iota_ideal = choice.ideal;
            p
        }
        None => CubePartition::from_choice(&grid, choice)?,
    };
    if part.iota < ens.epsilon {
        return Err(HomlabError::invalid(format!("cube side {} below epsilon {}", part.iota, ens.epsilon)));
    }
    let u0 = MacroFunction::of_kind(cfg.u0_kind(), &grid, true);
    let du0 = u0.sample_gradient(&grid);
    let opts = cfg.solve_options();
    let means = (0..cfg.samples)
        .into_par_iter()
        .map(|s| {
            let coef = ens.coefficients(s)?;
            let mut f = vec![0.0; grid.cells()];
            for i in 0..grid.d() {
                let sol = solve_corrector(&coef, i, cfg.regularization, &opts)?;
                let flux = drift_flux(&coef, i, &sol.grad_phi);
                for (lin, v) in f.iter_mut().enumerate() {
                    *v += (flux[lin] - hc.b_bar[i]) * du0[i][lin];
                }
            }
            Ok(part.averages(&f))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    cube_statistics(ens.epsilon, &part, &means, &cube_gradient_energy(&du0, &part))
}

pub fn localize_sweep(cfg: &LabConfig, hcs: &[HomogenizedCoefficients]) -> Result<LocalizedReport> {
    let mut points = Vec::new();
    for (k, hc) in hcs.iter().enumerate() {
        match &cfg.iotas {
            Some(list) => {
                for &iota in list {
                    points.push(localize_point(cfg, k, Some(iota), hc)?);
                }
            }
            None => points.push(localize_point(cfg, k, None, hc)?),
        }
    }
    localized_variance_check(points)
}

/// Five (or `count`) cube averages of `ω` of different sizes and positions.
pub fn cube_dictionary(grid: &GridSpec, count: usize) -> Result<Vec<CubeMean>> {
    let n = grid.n();
    let d = grid.d();
    let at = |c: usize| vec![c; d];
    let shapes = [(0, n), (0, n / 2), (n / 4, n / 2), (0, n / 4), (n / 2, n / 4)];
    shapes
        .iter()
        .cycle()
        .take(count)
        .enumerate()
        .map(|(k, &(lo, side))| {
            let shift = (k / shapes.len()) * n / 8;
            CubeMean::new(grid, &at((lo + shift).min(n - side.max(1))), side.max(1))
        })
        .collect()
}

/// Spectral-gap runs at the first `ε` for both covariance kinds.
pub fn sgap_run(cfg: &LabConfig) -> Result<Vec<(CovarianceKind, SpectralGapReport)>> {
    let eps = cfg.epsilons[0];
    let grid = cfg.grid_for(eps)?;
    let dict = cube_dictionary(&grid, cfg.sgap.functionals)?;
    let refs: Vec<&dyn Functional> = dict.iter().map(|f| f as &dyn Functional).collect();
    let spacing = if cfg.sgap.lattice_spacing > 0 {
        cfg.sgap.lattice_spacing
    } else {
        let cells = ((eps / (2.0 * grid.h())).floor() as usize).max(1);
        1 << cells.ilog2()
    };
    let (lattice, lattice_volume) = coarse_lattice(&grid, spacing)?;
    let mut out = Vec::new();
    for (idx, kind) in [CovarianceKind::SquaredExponential, CovarianceKind::LongRange].into_iter().enumerate() {
        let synth = GaussianSynthesizer::new(CovarianceSpec::new(kind, eps)?, &grid)?;
        let sc = SgapConfig {
            epsilon: eps,
            samples: cfg.sgap.samples,
            rhs_samples: cfg.sgap.rhs_samples,
            lattice: lattice.clone(),
            lattice_volume,
            t: DEFAULT_STEP,
            master_seed: cfg.seed,
            stream: stream(STREAM_SGAP, idx),
        };
        out.push((kind, spectral_gap_test(&refs, &synth, &sc)?));
    }
    Ok(out)
}

/// Files written and checks evaluated by one subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<Warning>,
    pub assertions: Vec<AssertionOutcome>,
}

fn csv_err(e: csv::Error) -> HomlabError {
    HomlabError::invalid(format!("csv: {e}"))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct RateRow<'a> {
    epsilon: f64,
    sample: usize,
    error: f64,
    norm: &'a str,
    iterations: usize,
}

pub fn write_rate_outputs(report: &RateReport, out: &Path) -> Result<Vec<PathBuf>> {
    let json = out.join("report.json");
    let csv_path = out.join("rates.csv");
    write_json(&json, report)?;
    write_csv(
        &csv_path,
        report.points.iter().flat_map(|p| &p.samples).map(|s| RateRow {
            epsilon: s.epsilon,
            sample: s.sample,
            error: s.error,
            norm: &report.norm,
            iterations: s.iterations,
        }),
    )?;
    Ok(vec![json, csv_path])
}

#[derive(Serialize)]
struct CovRow {
    epsilon: f64,
    lag: usize,
    covariance: f64,
    std_err: f64,
}

/// Dumps sample 0 at every `ε` and the empirical lag covariance over `M` samples.
pub fn run_sample_field(cfg: &LabConfig, out: &Path) -> Result<RunOutput> {
    let mut res = RunOutput::default();
    let mut rows = Vec::new();
    for (k, &eps) in cfg.epsilons.iter().enumerate() {
        let grid = cfg.grid_for(eps)?;
        let cov = CovarianceSpec::new(cfg.cov, eps)?;
        let synth = GaussianSynthesizer::new(cov, &grid)?;
        res.warnings.extend(synth.warnings().iter().cloned());
        let seed = |s: usize| crate::stats::derive_seed(cfg.seed, stream(STREAM_FIELD, k), s as u64);
        let fields: Vec<ParameterField> = (0..cfg.samples.max(2)).into_par_iter().map(|s| squash(&synth.sample(seed(s)))).collect();
        let header = FieldHeader {
            d: grid.d(),
            n: grid.n(),
            length: grid.length(),
            kind: Some(cfg.cov),
            epsilon: Some(eps),
            seed: seed(0),
            clipped_mass: synth.clipped_mass(),
        };
        let path = out.join(format!("field_eps{k}.bin"));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write_field(&mut file, &header, &fields[0])?;
        std::io::Write::flush(&mut file)?;
        res.files.push(path);
        let max_lag = (grid.n() / 2).min(16);
        for lag in empirical_covariance(&fields, max_lag)? {
            rows.push(CovRow { epsilon: eps, lag: lag.lag, covariance: lag.covariance, std_err: lag.std_err });
        }
    }
    let path = out.join("covariance.csv");
    write_csv(&path, rows)?;
    res.files.push(path);
    Ok(res)
}

#[derive(Serialize)]
struct MomentRow {
    epsilon: f64,
    sample: usize,
    phi2: f64,
    sigma2: f64,
    grad2: f64,
}

#[derive(Serialize)]
struct ResidualRow {
    epsilon: f64,
    sample: usize,
    r: f64,
    r1: f64,
    r2: f64,
    r_mean: f64,
    identity_residual: f64,
}

pub fn run_corrector(cfg: &LabConfig, out: &Path, with_residuals: bool) -> Result<RunOutput> {
    let hcs = homogenized_all(cfg)?;
    let points = (0..hcs.len()).map(|k| corrector_sweep_point(cfg, k, &hcs[k])).collect::<Result<Vec<_>>>()?;
    let mut res = RunOutput::default();
    if with_residuals {
        let report = residual_report(&points)?;
        let json = out.join("residuals.json");
        write_json(&json, &report)?;
        let csv_path = out.join("residuals.csv");
        write_csv(
            &csv_path,
            points.iter().flat_map(|p| {
                p.residuals.iter().enumerate().map(move |(s, r)| ResidualRow {
                    epsilon: p.epsilon,
                    sample: s,
                    r: r.r,
                    r1: r.r1,
                    r2: r.r2,
                    r_mean: r.r_mean,
                    identity_residual: r.identity_residual,
                })
            }),
        )?;
        res.files.extend([json, csv_path]);
    } else {
        let report = if cfg.samples >= 8 { Some(moment_report(&points)?) } else { None };
        let json = out.join("moments.json");
        write_json(&json, &report)?;
        let csv_path = out.join("moments.csv");
        write_csv(
            &csv_path,
            points.iter().flat_map(|p| {
                p.moments.iter().enumerate().map(move |(s, m)| MomentRow {
                    epsilon: p.epsilon,
                    sample: s,
                    phi2: m.phi2,
                    sigma2: m.sigma2,
                    grad2: m.grad2,
                })
            }),
        )?;
        res.files.extend([json, csv_path]);
    }
    Ok(res)
}

#[derive(Serialize)]
struct HomogRow {
    epsilon: f64,
    row: usize,
    col: usize,
    a_bar: f64,
    std_err: f64,
}

pub fn run_homogenize(cfg: &LabConfig, out: &Path) -> Result<RunOutput> {
    let hcs = homogenized_all(cfg)?;
    let json = out.join("homogenized.json");
    write_json(&json, &cfg.epsilons.iter().zip(&hcs).collect::<Vec<_>>())?;
    let csv_path = out.join("homogenized.csv");
    let d = cfg.d;
    write_csv(
        &csv_path,
        cfg.epsilons.iter().zip(&hcs).flat_map(|(&eps, hc)| {
            (0..d).flat_map(move |j| {
                (0..d).map(move |i| HomogRow { epsilon: eps, row: j, col: i, a_bar: hc.a_bar[j][i], std_err: hc.a_std_err[j][i] })
            })
        }),
    )?;
    let admissible = hcs.iter().all(|hc| hc.is_admissible(cfg.lambda));
    Ok(RunOutput {
        files: vec![json, csv_path],
        warnings: vec![],
        assertions: vec![AssertionOutcome::new("admissible", admissible, "symmetric part of a_bar within [1, lambda]")],
    })
}

#[derive(Serialize)]
struct LocalizeRow {
    epsilon: f64,
    iota_ideal: f64,
    iota_used: f64,
    cube_id: usize,
    mean: f64,
    variance: f64,
}

pub fn run_localize(cfg: &LabConfig, out: &Path) -> Result<RunOutput> {
    let hcs = homogenized_all(cfg)?;
    let report = localize_sweep(cfg, &hcs)?;
    let json = out.join("localize.json");
    write_json(&json, &report)?;
    let csv_path = out.join("localize.csv");
    write_csv(
        &csv_path,
        report.points.iter().flat_map(|p| {
            p.cubes.iter().map(move |c| LocalizeRow {
                epsilon: p.epsilon,
                iota_ideal: p.iota_ideal,
                iota_used: p.iota,
                cube_id: c.cube,
                mean: c.mean,
                variance: c.variance,
            })
        }),
    )?;
    Ok(RunOutput { files: vec![json, csv_path], ..Default::default() })
}

#[derive(Serialize)]
struct SgapRow {
    functional: String,
    kind: CovarianceKind,
    epsilon: f64,
    variance: f64,
    rhs: f64,
    rho_bound: Option<f64>,
}

pub fn run_sgap(cfg: &LabConfig, out: &Path) -> Result<RunOutput> {
    let runs = sgap_run(cfg)?;
    let json = out.join("sgap.json");
    write_json(&json, &runs)?;
    let csv_path = out.join("sgap.csv");
    write_csv(
        &csv_path,
        runs.iter().flat_map(|(kind, rep)| {
            rep.estimates.iter().map(move |e| SgapRow {
                functional: e.functional.clone(),
                kind: *kind,
                epsilon: e.epsilon,
                variance: e.variance.mean,
                rhs: e.rhs.mean,
                rho_bound: e.rho_bound,
            })
        }),
    )?;
    let short = &runs[0].1;
    Ok(RunOutput {
        files: vec![json, csv_path],
        warnings: vec![],
        assertions: vec![AssertionOutcome::new(
            "single-rho",
            short.single_rho_exists(),
            format!("run-wide rho {:?} for the squared-exponential field", short.rho),
        )],
    })
}

pub fn run_rate_command(cfg: &LabConfig, out: &Path) -> Result<RunOutput> {
    let report = run_rate(cfg)?;
    let files = write_rate_outputs(&report, out)?;
    Ok(RunOutput { files, warnings: report.warnings.clone(), assertions: report.assertions.clone() })
}

/// `u^ε - u₀` for a constant coefficient field equal to its own homogenization.
pub fn constant_coefficient_error(cfg: &LabConfig, grid: &GridSpec, a: f64, b: &[f64]) -> Result<f64> {
    let params = cfg.coefficient_params();
    let coef = CoefficientSet::constant(grid, a, b, cfg.lambda, params.zero_order)?;
    let hc = HomogenizedCoefficients::exact(
        (0..grid.d()).map(|j| (0..grid.d()).map(|i| if i == j { a } else { 0.0 }).collect()).collect(),
        b.to_vec(),
    );
    let periodic = cfg.setting == Setting::FullspaceProxy;
    let u0 = MacroFunction::of_kind(cfg.u0_kind(), grid, periodic);
    let (err, _, _, _) = rate_error(&coef, &hc, &u0, cfg.setting, &cfg.solve_options())?;
    let exact = u0.sample(grid);
    let scale = lp_norm(grid, &exact.values, setting_norm(cfg.setting).exponent(grid.d())?);
    Ok(err / scale)
}

/// Sample of `u₀` on `grid` for the configured setting.
pub fn macro_field(cfg: &LabConfig, grid: &GridSpec) -> ScalarField {
    MacroFunction::of_kind(cfg.u0_kind(), grid, cfg.setting == Setting::FullspaceProxy).sample(grid)
}
