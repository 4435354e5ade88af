//! Monte Carlo test of the spectral-gap variance inequality, with Fréchet
//! derivatives approximated by central differences over a perturbation
//! dictionary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::SolveOptions;
use crate::corrector::{solve_corrector, Regularization};
use crate::error::{HomlabError, Result};
use crate::field::{coefficient_map, squash, CoefficientParams, GaussianSynthesizer, ParameterField};
use crate::grid::{GridSpec, MAX_DIM};
use crate::homog::drift_flux;
use crate::localize::CubePartition;
use crate::stats::{derive_seed, variance_with_se, Estimate};

pub const DEFAULT_STEP: f64 = 1e-4;

/// A real-valued functional of the parameter field.
pub trait Functional: Sync {
    fn id(&self) -> String;
    fn eval(&self, omega: &ParameterField) -> Result<f64>;
}

/// Mean of the cell values of `ω` over an axis-aligned box of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeMean {
    pub lo: [usize; MAX_DIM],
    pub side: usize,
}

impl CubeMean {
    pub fn new(grid: &GridSpec, lo: &[usize], side: usize) -> Result<Self> {
        let d = grid.d();
        if lo.len() != d || side == 0 || lo.iter().any(|&c| c + side > grid.n()) {
            return Err(HomlabError::invalid("cube does not fit in the grid"));
        }
        let mut l = [0; MAX_DIM];
        l[..d].copy_from_slice(lo);
        Ok(CubeMean { lo: l, side })
    }

    fn contains(&self, c: &[usize; MAX_DIM], d: usize) -> bool {
        (0..d).all(|a| c[a] >= self.lo[a] && c[a] < self.lo[a] + self.side)
    }
}

impl Functional for CubeMean {
    fn id(&self) -> String {
        format!("cube-mean[{:?}+{}]", &self.lo, self.side)
    }

    fn eval(&self, omega: &ParameterField) -> Result<f64> {
        let g = &omega.grid;
        let d = g.d();
        let mut sum = 0.0;
        for lin in 0..g.cells() {
            if self.contains(&g.coords(lin), d) {
                sum += omega.cell[lin];
            }
        }
        Ok(sum / self.side.pow(d as u32) as f64)
    }
}

/// `⨏_{z+□_ι} Σ_i Γ_i ∂_i u₀` recomputed from `ω` through the correctors.
/// With `fixed_diffusion` set, `a` ignores `ω` and only the drift is random.
#[derive(Debug, Clone)]
pub struct GammaCubeFunctional {
    pub params: CoefficientParams,
    pub fixed_diffusion: Option<f64>,
    pub b_bar: Vec<f64>,
    /// `du0[i]`: `∂_i u₀` at cells.
    pub du0: Vec<Vec<f64>>,
    pub part: CubePartition,
    pub cube: usize,
    pub t: Regularization,
    pub opts: SolveOptions,
}

impl Functional for GammaCubeFunctional {
    fn id(&self) -> String {
        format!("gamma-cube[{}]", self.cube)
    }

    fn eval(&self, omega: &ParameterField) -> Result<f64> {
        // Central differences may step a hair outside (-1, 1).
        let lim = 1.0 - 1e-12;
        let mut w = omega.clone();
        w.cell.iter_mut().chain(w.faces.iter_mut().flatten()).for_each(|v| *v = v.clamp(-lim, lim));
        let mut coef = coefficient_map(&w, &self.params)?;
        if let Some(a0) = self.fixed_diffusion {
            coef.a.iter_mut().flatten().for_each(|v| *v = a0);
        }
        let g = coef.grid;
        let mut f = vec![0.0; g.cells()];
        for i in 0..g.d() {
            let sol = solve_corrector(&coef, i, self.t, &self.opts)?;
            let flux = drift_flux(&coef, i, &sol.grad_phi);
            for lin in 0..g.cells() {
                f[lin] += (flux[lin] - self.b_bar[i]) * self.du0[i][lin];
            }
        }
        Ok(self.part.averages(&f)[self.cube])
    }
}

/// Cells and faces of `B_ε(x)` with their offsets from `x`.
struct Ball {
    cells: Vec<(usize, [f64; MAX_DIM])>,
    faces: Vec<Vec<(usize, [f64; MAX_DIM])>>,
}

impl Ball {
    fn new(grid: &GridSpec, x: usize, eps: f64) -> Self {
        let d = grid.d();
        let xc = grid.cell_center(x);
        let r = (eps / grid.h()).ceil() as isize + 1;
        let mut cells = Vec::new();
        let mut faces = vec![Vec::new(); d];
        let span = (2 * r + 1) as usize;
        let mut offs = [0isize; MAX_DIM];
        let total = span.pow(d as u32);
        let mut seen = std::collections::HashSet::new();
        for k in 0..total {
            let mut rem = k;
            for a in 0..d {
                offs[a] = (rem % span) as isize - r;
                rem /= span;
            }
            let lin = grid.shifted(x, &offs[..d]);
            if !seen.insert(lin) {
                continue;
            }
            let dc = grid.periodic_delta(&grid.cell_center(lin), &xc);
            if dc[..d].iter().map(|v| v * v).sum::<f64>().sqrt() < eps {
                cells.push((lin, dc));
            }
            for (axis, list) in faces.iter_mut().enumerate() {
                let df = grid.periodic_delta(&grid.face_center(lin, axis), &xc);
                if df[..d].iter().map(|v| v * v).sum::<f64>().sqrt() < eps {
                    list.push((lin, df));
                }
            }
        }
        if cells.is_empty() {
            cells.push((x, [0.0; MAX_DIM]));
        }
        Ball { cells, faces }
    }

    /// Dictionary direction `k`: 0 is the bump, `1..=d` the dipoles
    /// `sign(y-x)_j`, `d+1..=2d` the half balls `1{(y-x)_j > 0}`.
    fn weight(k: usize, d: usize, delta: &[f64; MAX_DIM]) -> f64 {
        if k == 0 {
            1.0
        } else if k <= d {
            let v = delta[k - 1];
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        } else if delta[k - d - 1] > 0.0 {
            1.0
        } else {
            0.0
        }
    }

    fn shift(&self, omega: &mut ParameterField, k: usize, amount: f64) {
        let d = omega.grid.d();
        for &(lin, ref delta) in &self.cells {
            omega.cell[lin] += amount * Self::weight(k, d, delta);
        }
        for (axis, list) in self.faces.iter().enumerate() {
            for &(lin, ref delta) in list {
                omega.faces[axis][lin] += amount * Self::weight(k, d, delta);
            }
        }
    }

    fn restore(&self, omega: &mut ParameterField, orig: &ParameterField) {
        for &(lin, _) in &self.cells {
            omega.cell[lin] = orig.cell[lin];
        }
        for (axis, list) in self.faces.iter().enumerate() {
            for &(lin, _) in list {
                omega.faces[axis][lin] = orig.faces[axis][lin];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetValue {
    pub value: f64,
    pub dictionary_size: usize,
    pub t: f64,
    /// Number of cells in the discrete ball.
    pub ball_cells: usize,
}

/// Largest central difference `|F(ω+tδω) - F(ω-tδω)| / (2t)` over the
/// `2d+1` dictionary directions supported in `B_ε(x)`.
pub fn frechet_norm(f: &dyn Functional, omega: &ParameterField, x: usize, eps: f64, t: f64) -> Result<FrechetValue> {
    let mut work = omega.clone();
    frechet_in_place(f, &mut work, omega, x, eps, t)
}

/// As [`frechet_norm`], perturbing `work` (equal to `omega` on entry and on
/// exit) instead of a fresh copy.
fn frechet_in_place(
    f: &dyn Functional,
    work: &mut ParameterField,
    omega: &ParameterField,
    x: usize,
    eps: f64,
    t: f64,
) -> Result<FrechetValue> {
    let g = omega.grid;
    if x >= g.cells() {
        return Err(HomlabError::invalid(format!("cell {x} out of range")));
    }
    let ball = Ball::new(&g, x, eps);
    let dict = 2 * g.d() + 1;
    let mut best = 0.0f64;
    for k in 0..dict {
        ball.shift(work, k, t);
        let plus = f.eval(work);
        ball.restore(work, omega);
        ball.shift(work, k, -t);
        let minus = f.eval(work);
        ball.restore(work, omega);
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(HomlabError::NonFinite(format!(
                "{} under dictionary direction {k} at cell {x}",
                f.id()
            )));
        }
        best = best.max((plus - minus).abs() / (2.0 * t));
    }
    Ok(FrechetValue { value: best, dictionary_size: dict, t, ball_cells: ball.cells.len() })
}

/// Cells on a sub-lattice with the given spacing in cells, and the volume
/// each lattice point represents.
pub fn coarse_lattice(grid: &GridSpec, spacing: usize) -> Result<(Vec<usize>, f64)> {
    if spacing == 0 || grid.n() % spacing != 0 {
        return Err(HomlabError::invalid(format!("lattice spacing {spacing} must divide n = {}", grid.n())));
    }
    let cells = (0..grid.cells())
        .filter(|&lin| grid.coords(lin)[..grid.d()].iter().all(|c| c % spacing == 0))
        .collect();
    Ok((cells, (spacing as f64 * grid.h()).powi(grid.d() as i32)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgapConfig {
    pub epsilon: f64,
    pub samples: usize,
    /// Leading samples on which the right-hand side is evaluated.
    pub rhs_samples: usize,
    pub lattice: Vec<usize>,
    pub lattice_volume: f64,
    pub t: f64,
    pub master_seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGapEstimate {
    pub functional: String,
    pub epsilon: f64,
    pub variance: Estimate,
    /// `E ∫ (⨏_{B_ε(x)} |∂F/∂ω|)² dx` over the lattice.
    pub rhs: Estimate,
    /// `sqrt(ε^d rhs / Var)`, when the variance is resolved.
    pub rho_bound: Option<f64>,
    pub dictionary_size: usize,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGapReport {
    pub estimates: Vec<SpectralGapEstimate>,
    /// Smallest implied bound; the inequality holds for every functional
    /// with this single value.
    pub rho: Option<f64>,
}

impl SpectralGapReport {
    /// Whether one positive ρ covers every functional with a resolved variance.
    pub fn single_rho_exists(&self) -> bool {
        self.rho.is_some_and(|r| r > 0.0)
            && self.estimates.iter().all(|e| e.rho_bound.is_some() || e.variance.mean <= 3.0 * e.variance.std_err)
    }
}

/// `∫ (frechet(x) / |B_ε|)² dx` over the lattice for one realization.
pub fn rhs_integral(f: &dyn Functional, omega: &ParameterField, cfg: &SgapConfig) -> Result<f64> {
    let vol = omega.grid.cell_volume();
    let mut work = omega.clone();
    let mut s = 0.0;
    for &x in &cfg.lattice {
        let fv = frechet_in_place(f, &mut work, omega, x, cfg.epsilon, cfg.t)?;
        let avg = fv.value / (fv.ball_cells as f64 * vol);
        s += avg * avg * cfg.lattice_volume;
    }
    Ok(s)
}

pub fn spectral_gap_test(functionals: &[&dyn Functional], synth: &GaussianSynthesizer, cfg: &SgapConfig) -> Result<SpectralGapReport> {
    if cfg.samples < 256 {
        return Err(HomlabError::invalid(format!("need at least 256 samples, got {}", cfg.samples)));
    }
    let nf = functionals.len();
    let per_sample: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = (0..cfg.samples)
        .into_par_iter()
        .map(|s| {
            let omega = squash(&synth.sample(derive_seed(cfg.master_seed, cfg.stream, s as u64)));
            let values = functionals.iter().map(|f| f.eval(&omega)).collect::<Result<Vec<_>>>()?;
            let rhs = if s < cfg.rhs_samples {
                Some(functionals.iter().map(|f| rhs_integral(*f, &omega, cfg)).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            Ok((values, rhs))
        })
        .collect();
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
    let d = synth.grid().d() as i32;
    let mut estimates = Vec::with_capacity(nf);
    for (k, f) in functionals.iter().enumerate() {
        let vals: Vec<f64> = per_sample.iter().map(|(v, _)| v[k]).collect();
        let rhs_vals: Vec<f64> = per_sample.iter().filter_map(|(_, r)| r.as_ref().map(|r| r[k])).collect();
        let variance = variance_with_se(&vals);
        let rhs = Estimate::from_samples(&rhs_vals);
        let rho_bound = (variance.mean > 3.0 * variance.std_err && variance.mean > 0.0 && rhs.mean > 0.0)
            .then(|| (cfg.epsilon.powi(d) * rhs.mean / variance.mean).sqrt());
        estimates.push(SpectralGapEstimate {
            functional: f.id(),
            epsilon: cfg.epsilon,
            variance,
            rhs,
            rho_bound,
            dictionary_size: 2 * d as usize + 1,
            t: cfg.t,
        });
    }
    let rho = estimates.iter().filter_map(|e| e.rho_bound).reduce(f64::min);
    Ok(SpectralGapReport { estimates, rho })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub variance: Estimate,
    pub rhs: Estimate,
    pub rho: f64,
    /// `ε^d rhs / ρ²`.
    pub bound: f64,
    pub ratio: f64,
    /// `Var - bound <= 3` combined standard errors.
    pub holds: bool,
}

/// Compares a measured cube-average variance with the spectral-gap bound for
/// the same functional at a calibrated `ρ`.
pub fn gamma_variance_bridge(
    variance: Estimate,
    f: &dyn Functional,
    synth: &GaussianSynthesizer,
    cfg: &SgapConfig,
    rho: f64,
) -> Result<BridgeReport> {
    if !(rho > 0.0) {
        return Err(HomlabError::invalid("rho must be positive"));
    }
    let rhs_vals = (0..cfg.rhs_samples)
        .into_par_iter()
        .map(|s| {
            let omega = squash(&synth.sample(derive_seed(cfg.master_seed, cfg.stream, s as u64)));
            rhs_integral(f, &omega, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let rhs = Estimate::from_samples(&rhs_vals);
    let scale = cfg.epsilon.powi(synth.grid().d() as i32) / (rho * rho);
    let bound = scale * rhs.mean;
    let se = (variance.std_err.powi(2) + (scale * rhs.std_err).powi(2)).sqrt();
    let ratio = if bound > 0.0 { variance.mean / bound } else if variance.mean == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(BridgeReport { variance, rhs, rho, bound, ratio, holds: variance.mean - bound <= 3.0 * se })
}
