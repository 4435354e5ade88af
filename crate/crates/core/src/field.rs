//! Stationary Gaussian parameter fields and the coefficient maps built on them.
//!
//! Fields are synthesized spectrally on the periodic grid: the kernel is wrapped
//! onto the torus, its DFT gives the modal variances of the circulant
//! covariance, and a white-noise sample is coloured by the square roots of
//! those variances. Face-centred samples reuse the same spectral coefficients
//! with a half-cell phase shift, so cells and faces see one continuous field.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HomlabError, Result, Warning};
use crate::fft::{wavenumber, FftNd};
use crate::grid::{for_each_cell, GridSpec, MAX_DIM};

/// Fraction of negative modal mass above which a warning is attached.
pub const CLIPPED_MASS_WARN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    /// `exp(-r^2 / (2 eps^2))`
    SquaredExponential,
    /// `(1 + r/eps)^(-1/2)`
    LongRange,
}

impl std::fmt::Display for CovarianceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovarianceKind::SquaredExponential => write!(f, "squared-exponential"),
            CovarianceKind::LongRange => write!(f, "long-range"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub kind: CovarianceKind,
    pub epsilon: f64,
}

impl CovarianceSpec {
    pub fn new(kind: CovarianceKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(HomlabError::invalid(format!(
                "correlation length must lie in (0, 1], got {epsilon}"
            )));
        }
        Ok(CovarianceSpec { kind, epsilon })
    }

    pub fn squared_exponential(epsilon: f64) -> Result<Self> {
        Self::new(CovarianceKind::SquaredExponential, epsilon)
    }

    pub fn long_range(epsilon: f64) -> Result<Self> {
        Self::new(CovarianceKind::LongRange, epsilon)
    }

    /// Kernel value at separation `r >= 0`.
    pub fn kernel(&self, r: f64) -> f64 {
        let e = self.epsilon;
        match self.kind {
            CovarianceKind::SquaredExponential => (-r * r / (2.0 * e * e)).exp(),
            CovarianceKind::LongRange => (1.0 + r / e).powf(-0.5),
        }
    }

    /// Kernel wrapped onto the torus of the given grid, evaluated at a
    /// separation vector. The squared-exponential kernel is summed over
    /// periodic images (it factorizes per axis); the long-range kernel is not
    /// summable and uses the minimum-image distance instead.
    pub fn periodized(&self, grid: &GridSpec, delta: &[f64]) -> f64 {
        let l = grid.length();
        match self.kind {
            CovarianceKind::SquaredExponential => {
                let e = self.epsilon;
                let images = (8.0 * e / l).ceil() as i64 + 1;
                (0..grid.d())
                    .map(|axis| {
                        let x = delta[axis] - l * (delta[axis] / l).round();
                        (-images..=images)
                            .map(|m| {
                                let y = x + m as f64 * l;
                                (-y * y / (2.0 * e * e)).exp()
                            })
                            .sum::<f64>()
                    })
                    .product()
            }
            CovarianceKind::LongRange => {
                let r = (0..grid.d())
                    .map(|axis| {
                        let x = delta[axis] - l * (delta[axis] / l).round();
                        x * x
                    })
                    .sum::<f64>()
                    .sqrt();
                self.kernel(r)
            }
        }
    }
}

/// Raw (unsquashed) Gaussian sample at cell centres and face centres.
#[derive(Debug, Clone, PartialEq)]
pub struct RawField {
    pub grid: GridSpec,
    pub cell: Vec<f64>,
    /// `faces[j][c]` is the value at `x_c + h/2 e_j`.
    pub faces: Vec<Vec<f64>>,
    pub seed: u64,
    pub clipped_mass: f64,
    pub warnings: Vec<Warning>,
}

/// Reusable spectral synthesizer for one (covariance, grid) pair.
#[derive(Debug, Clone)]
pub struct GaussianSynthesizer {
    grid: GridSpec,
    cov: Option<CovarianceSpec>,
    fft: FftNd,
    sqrt_modal: Vec<f64>,
    modal: Vec<f64>,
    clipped_mass: f64,
    warnings: Vec<Warning>,
}

impl GaussianSynthesizer {
    pub fn new(cov: CovarianceSpec, grid: &GridSpec) -> Result<Self> {
        CovarianceSpec::new(cov.kind, cov.epsilon)?;
        let h = grid.h();
        let mut row = vec![0.0; grid.cells()];
        for_each_cell(grid, |lin, c| {
            let mut delta = [0.0; MAX_DIM];
            for axis in 0..grid.d() {
                delta[axis] = c[axis] as f64 * h;
            }
            row[lin] = cov.periodized(grid, &delta);
        });
        let fft = FftNd::new(grid);
        let modal: Vec<f64> = fft.forward_real(&row).iter().map(|z| z.re).collect();
        let mut s = Self::from_modal_variances(grid, modal)?;
        s.cov = Some(cov);
        Ok(s)
    }

    /// Builds a synthesizer from prescribed circulant eigenvalues. Negative
    /// entries are clipped to zero and their share of the total mass recorded.
    pub fn from_modal_variances(grid: &GridSpec, modal: Vec<f64>) -> Result<Self> {
        if modal.len() != grid.cells() {
            return Err(HomlabError::GridMismatch(format!(
                "{} modal variances for {} cells",
                modal.len(),
                grid.cells()
            )));
        }
        let total: f64 = modal.iter().map(|v| v.abs()).sum();
        let negative: f64 = modal.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
        let clipped_mass = if total > 0.0 { negative / total } else { 0.0 };
        let mut warnings = Vec::new();
        if clipped_mass > CLIPPED_MASS_WARN {
            warnings.push(Warning::new(
                "clipped-mass",
                format!("clipped {clipped_mass:.3e} of the modal variance (> {CLIPPED_MASS_WARN:e})"),
            ));
        }
        let clipped: Vec<f64> = modal.iter().map(|v| v.max(0.0)).collect();
        Ok(GaussianSynthesizer {
            grid: *grid,
            cov: None,
            fft: FftNd::new(grid),
            sqrt_modal: clipped.iter().map(|v| v.sqrt()).collect(),
            modal: clipped,
            clipped_mass,
            warnings,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn covariance(&self) -> Option<CovarianceSpec> {
        self.cov
    }

    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    /// Covariance of the synthesized field at every cell lag (inverse DFT of
    /// the clipped modal variances).
    pub fn lag_covariance(&self) -> Vec<f64> {
        let mut buf: Vec<Complex64> = self.modal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.inverse(&mut buf);
        buf.iter().map(|z| z.re).collect()
    }

    pub fn white_noise(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.grid.cells())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    pub fn sample(&self, seed: u64) -> RawField {
        let noise = self.white_noise(seed);
        let mut f = self.colour(&noise);
        f.seed = seed;
        f
    }

    /// Colours a given white-noise vector.
    pub fn colour(&self, noise: &[f64]) -> RawField {
        assert_eq!(noise.len(), self.grid.cells());
        let mut spec = self.fft.forward_real(noise);
        for (z, s) in spec.iter_mut().zip(&self.sqrt_modal) {
            *z *= *s;
        }
        let mut work = spec.clone();
        self.fft.inverse(&mut work);
        let cell: Vec<f64> = work.iter().map(|z| z.re).collect();

        let n = self.grid.n();
        let phases: Vec<Complex64> = (0..n)
            .map(|m| {
                let k = wavenumber(m, n) as f64;
                Complex64::from_polar(1.0, PI * k / n as f64)
            })
            .collect();
        let faces = (0..self.grid.d())
            .map(|axis| {
                let s = self.grid.stride(axis);
                for (lin, w) in work.iter_mut().enumerate() {
                    *w = spec[lin] * phases[(lin / s) % n];
                }
                self.fft.inverse(&mut work);
                work.iter().map(|z| z.re).collect()
            })
            .collect();
        RawField {
            grid: self.grid,
            cell,
            faces,
            seed: 0,
            clipped_mass: self.clipped_mass,
            warnings: self.warnings.clone(),
        }
    }
}

/// One-shot sampling; prefer [`GaussianSynthesizer`] for ensembles.
pub fn sample_gaussian_field(cov: CovarianceSpec, grid: &GridSpec, seed: u64) -> Result<RawField> {
    Ok(GaussianSynthesizer::new(cov, grid)?.sample(seed))
}

/// Parameter field with values in (-1, 1) at cell and face centres.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterField {
    pub grid: GridSpec,
    pub cell: Vec<f64>,
    pub faces: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ParameterField {
    /// Evaluates `f` at every cell and face centre.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let cell = (0..grid.cells()).map(|lin| f(&grid.cell_center(lin))).collect();
        let faces = (0..grid.d())
            .map(|axis| (0..grid.cells()).map(|lin| f(&grid.face_center(lin, axis))).collect())
            .collect();
        ParameterField { grid: *grid, cell, faces, seed: 0 }
    }

    pub fn constant(grid: &GridSpec, value: f64) -> Self {
        Self::from_fn(grid, |_| value)
    }
}

/// The squashing map `tanh`: odd, monotone, 1-Lipschitz onto (-1, 1).
#[inline]
pub fn squash_value(g: f64) -> f64 {
    g.tanh()
}

pub fn squash(raw: &RawField) -> ParameterField {
    ParameterField {
        grid: raw.grid,
        cell: raw.cell.iter().map(|&g| squash_value(g)).collect(),
        faces: raw
            .faces
            .iter()
            .map(|f| f.iter().map(|&g| squash_value(g)).collect())
            .collect(),
        seed: raw.seed,
    }
}

/// Parameters of the affine coefficient maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientParams {
    pub lambda: f64,
    pub drift_bound: f64,
    pub zero_order: f64,
    pub drift_direction: Vec<f64>,
}

impl CoefficientParams {
    /// `Λ = K^2 + 1`, drift along `e_1`.
    pub fn minimal(d: usize, lambda: f64, drift_bound: f64) -> Self {
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        CoefficientParams {
            lambda,
            drift_bound,
            zero_order: drift_bound * drift_bound + 1.0,
            drift_direction: v,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.lambda > 1.0) {
            return Err(HomlabError::invalid(format!("lambda must exceed 1, got {}", self.lambda)));
        }
        if !(self.drift_bound >= 0.0) {
            return Err(HomlabError::invalid("drift bound K must be non-negative"));
        }
        let k2 = self.drift_bound * self.drift_bound;
        if !(self.zero_order >= k2 + 1.0) {
            return Err(HomlabError::invalid(format!(
                "zero-order coefficient {} violates Lambda >= K^2 + 1 = {}",
                self.zero_order,
                k2 + 1.0
            )));
        }
        if self.drift_direction.len() != d {
            return Err(HomlabError::invalid(format!(
                "drift direction has {} components, expected {d}",
                self.drift_direction.len()
            )));
        }
        if self.drift_bound > 0.0 && crate::grid::norm2(&self.drift_direction) == 0.0 {
            return Err(HomlabError::invalid("drift direction must be non-zero"));
        }
        Ok(())
    }

    /// `|d a / d omega|` of the affine diffusion map.
    pub fn a_derivative_bound(&self) -> f64 {
        (self.lambda - 1.0) / 2.0
    }

    /// `|d b / d omega|` of the drift map.
    pub fn b_derivative_bound(&self) -> f64 {
        self.drift_bound
    }

    #[inline]
    pub fn diffusion(&self, omega: f64) -> f64 {
        1.0 + (self.lambda - 1.0) * (omega + 1.0) / 2.0
    }
}

/// Isotropic diffusion `a(x) Id` on faces, drift `b` on cells, and the
/// scalar bounds `λ`, `K`, `Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub grid: GridSpec,
    /// `a[j][c]`: diffusion at face `j` of cell `c`.
    pub a: Vec<Vec<f64>>,
    /// `b[j][c]`: component `j` of the drift at cell `c`.
    pub b: Vec<Vec<f64>>,
    pub lambda: f64,
    pub drift_bound: f64,
    pub zero_order: f64,
}

impl CoefficientSet {
    /// Samples analytic coefficient functions; checks the pointwise bounds
    /// `1 <= a <= λ` and `|b| <= K`.
    pub fn from_fns(
        grid: &GridSpec,
        a: impl Fn(&[f64]) -> f64,
        b: impl Fn(&[f64]) -> Vec<f64>,
        lambda: f64,
        drift_bound: f64,
        zero_order: f64,
    ) -> Result<Self> {
        let d = grid.d();
        let a_faces = (0..d)
            .map(|axis| (0..grid.cells()).map(|lin| a(&grid.face_center(lin, axis))).collect())
            .collect();
        let mut b_cells = vec![vec![0.0; grid.cells()]; d];
        for lin in 0..grid.cells() {
            let v = b(&grid.cell_center(lin));
            for axis in 0..d {
                b_cells[axis][lin] = v[axis];
            }
        }
        let set = CoefficientSet {
            grid: *grid,
            a: a_faces,
            b: b_cells,
            lambda,
            drift_bound,
            zero_order,
        };
        set.check_bounds()?;
        Ok(set)
    }

    pub fn constant(grid: &GridSpec, a: f64, b: &[f64], lambda: f64, zero_order: f64) -> Result<Self> {
        let k = crate::grid::norm2(b);
        let bv = b.to_vec();
        Self::from_fns(grid, |_| a, move |_| bv.clone(), lambda, k, zero_order)
    }

    /// Full scan of the ellipticity and drift bounds.
    pub fn check_bounds(&self) -> Result<()> {
        if !(self.lambda > 1.0) {
            return Err(HomlabError::invalid(format!("lambda must exceed 1, got {}", self.lambda)));
        }
        let tol = 1e-12;
        for (axis, faces) in self.a.iter().enumerate() {
            for (lin, &v) in faces.iter().enumerate() {
                if !(v >= 1.0 - tol && v <= self.lambda * (1.0 + tol)) {
                    return Err(HomlabError::invalid(format!(
                        "a = {v} at face {axis} of cell {lin} outside [1, {}]",
                        self.lambda
                    )));
                }
            }
        }
        for lin in 0..self.grid.cells() {
            let m = self.drift_at(lin).iter().map(|x| x * x).sum::<f64>().sqrt();
            if m > self.drift_bound * (1.0 + tol) + tol {
                return Err(HomlabError::invalid(format!(
                    "|b| = {m} at cell {lin} exceeds K = {}",
                    self.drift_bound
                )));
            }
        }
        Ok(())
    }

    /// Whether `Λ >= K^2 + 1` holds.
    pub fn is_coercive(&self) -> bool {
        self.zero_order >= self.drift_bound * self.drift_bound + 1.0
    }

    pub fn drift_at(&self, lin: usize) -> [f64; MAX_DIM] {
        let mut v = [0.0; MAX_DIM];
        for (axis, comp) in self.b.iter().enumerate() {
            v[axis] = comp[lin];
        }
        v
    }

    pub fn has_drift(&self) -> bool {
        self.b.iter().any(|c| c.iter().any(|&v| v != 0.0))
    }

    pub fn min_a(&self) -> f64 {
        self.a.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_a(&self) -> f64 {
        self.a.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_a(&self) -> f64 {
        let total: f64 = self.a.iter().flatten().sum();
        total / (self.grid.cells() * self.grid.d()) as f64
    }

    /// Grid Péclet number `h K / (2 min a)`.
    pub fn peclet(&self) -> f64 {
        self.grid.h() * self.drift_bound / (2.0 * self.min_a())
    }

    /// Largest finite-difference slope of `a` between neighbouring faces of the
    /// same orientation (empirical Lipschitz constant in `x`).
    pub fn max_lipschitz_slope(&self) -> f64 {
        let h = self.grid.h();
        let mut m = 0.0f64;
        for faces in &self.a {
            for lin in 0..self.grid.cells() {
                for axis in 0..self.grid.d() {
                    let nb = self.grid.neighbor(lin, axis, 1);
                    m = m.max((faces[nb] - faces[lin]).abs() / h);
                }
            }
        }
        m
    }

    /// Periodic repetition `factor` times along every axis.
    pub fn tile(&self, factor: usize) -> Result<Self> {
        let big = self.grid.tiled(factor)?;
        let n = self.grid.n();
        let map: Vec<usize> = (0..big.cells())
            .map(|lin| {
                let c = big.coords(lin);
                let mut small = [0usize; MAX_DIM];
                for axis in 0..big.d() {
                    small[axis] = c[axis] % n;
                }
                self.grid.index(&small)
            })
            .collect();
        let rep = |v: &Vec<f64>| map.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        Ok(CoefficientSet {
            grid: big,
            a: self.a.iter().map(rep).collect(),
            b: self.b.iter().map(rep).collect(),
            lambda: self.lambda,
            drift_bound: self.drift_bound,
            zero_order: self.zero_order,
        })
    }
}

/// `a(ω) = 1 + (λ-1)(ω+1)/2` on faces, `b(ω) = K ω v/|v|` on cells.
pub fn coefficient_map(param: &ParameterField, params: &CoefficientParams) -> Result<CoefficientSet> {
    let d = param.grid.d();
    params.validate(d)?;
    let norm = crate::grid::norm2(&params.drift_direction);
    let unit: Vec<f64> = if norm > 0.0 {
        params.drift_direction.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; d]
    };
    let a = param
        .faces
        .iter()
        .map(|f| f.iter().map(|&w| params.diffusion(w)).collect())
        .collect();
    let b = unit
        .iter()
        .map(|&u| param.cell.iter().map(|&w| params.drift_bound * w * u).collect())
        .collect();
    let set = CoefficientSet {
        grid: param.grid,
        a,
        b,
        lambda: params.lambda,
        drift_bound: params.drift_bound,
        zero_order: params.zero_order,
    };
    set.check_bounds()?;
    Ok(set)
}

/// Random coefficient ensemble: one covariance, one grid, one coefficient map.
#[derive(Debug, Clone)]
pub struct CoefficientSampler {
    pub synth: GaussianSynthesizer,
    pub params: CoefficientParams,
    pub master_seed: u64,
    pub stream: u64,
}

impl CoefficientSampler {
    pub fn new(cov: CovarianceSpec, grid: &GridSpec, params: CoefficientParams, master_seed: u64, stream: u64) -> Result<Self> {
        params.validate(grid.d())?;
        Ok(CoefficientSampler {
            synth: GaussianSynthesizer::new(cov, grid)?,
            params,
            master_seed,
            stream,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        self.synth.grid()
    }

    pub fn seed(&self, index: usize) -> u64 {
        crate::stats::derive_seed(self.master_seed, self.stream, index as u64)
    }

    pub fn parameter_field(&self, index: usize) -> ParameterField {
        squash(&self.synth.sample(self.seed(index)))
    }

    pub fn sample(&self, index: usize) -> Result<CoefficientSet> {
        coefficient_map(&self.parameter_field(index), &self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceLag {
    pub lag: usize,
    pub covariance: f64,
    pub std_err: f64,
}

/// Axis-lag covariance of the cell values, centred on the grand mean, averaged
/// over space and axes per sample, then over samples.
pub fn empirical_covariance(samples: &[ParameterField], max_lag: usize) -> Result<Vec<CovarianceLag>> {
    if samples.len() < 2 {
        return Err(HomlabError::invalid("need at least two samples"));
    }
    let grid = samples[0].grid;
    for s in samples {
        grid.ensure_same(&s.grid)?;
    }
    if max_lag >= grid.n() {
        return Err(HomlabError::invalid("max lag must be smaller than n"));
    }
    let total: f64 = samples.iter().flat_map(|s| s.cell.iter()).sum();
    let mean = total / (samples.len() * grid.cells()) as f64;
    let mut out = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let per_sample: Vec<f64> = samples
            .iter()
            .map(|s| {
                let mut acc = 0.0;
                for axis in 0..grid.d() {
                    let mut offs = [0isize; MAX_DIM];
                    offs[axis] = lag as isize;
                    for lin in 0..grid.cells() {
                        let other = grid.shifted(lin, &offs);
                        acc += (s.cell[lin] - mean) * (s.cell[other] - mean);
                    }
                }
                acc / (grid.cells() * grid.d()) as f64
            })
            .collect();
        let e = crate::stats::Estimate::from_samples(&per_sample);
        out.push(CovarianceLag { lag, covariance: e.mean, std_err: e.std_err });
    }
    Ok(out)
}
