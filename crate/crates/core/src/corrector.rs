//! First-order correctors `φ_i`, their fluxes `q_i` and the skew flux
//! correctors `σ_i`, per coefficient realization on the torus.
//!
//! `φ_i` solves `-div(a (e_i + grad φ_i)) + φ_i / T = 0`; with `T = ∞` the
//! solution is fixed by a zero mean. `σ_i` is edge-staggered so that
//! `Σ_k D⁻_k σ_ijk = q_ij - mean(q_ij)` holds up to the corrector residual.

use serde::{Deserialize, Serialize};

use crate::calculus::{
    gradient, lp_norm, pcg, BoundaryCondition, EllipticOperator, ScalarField, SkewTensorField, SolveOptions,
    SpectralPreconditioner, VectorField,
};
use crate::error::{HomlabError, Result};
use crate::fft::{laplacian_symbol, FftNd};
use crate::field::{CoefficientParams, CoefficientSet, ParameterField};
use crate::grid::{GridSpec, MAX_DIM};
use crate::stats::{ols, Estimate, LineFit};

/// `None` is the mean-zero periodic problem (`T = ∞`).
pub type Regularization = Option<f64>;

#[derive(Debug, Clone)]
pub struct CorrectorSolution {
    pub phi: ScalarField,
    pub grad_phi: VectorField,
    pub iterations: usize,
    pub residual: f64,
}

/// `div(a e_i)` on cells.
fn corrector_rhs(coef: &CoefficientSet, i: usize) -> Vec<f64> {
    let g = &coef.grid;
    let h = g.h();
    let ai = &coef.a[i];
    (0..g.cells()).map(|lin| (ai[lin] - ai[g.neighbor(lin, i, -1)]) / h).collect()
}

pub fn solve_corrector(coef: &CoefficientSet, i: usize, t: Regularization, opts: &SolveOptions) -> Result<CorrectorSolution> {
    let g = coef.grid;
    if i >= g.d() {
        return Err(HomlabError::invalid(format!("direction {i} out of range for d = {}", g.d())));
    }
    if let Some(t) = t {
        if !(t > 0.0) {
            return Err(HomlabError::invalid("regularization T must be positive"));
        }
    }
    let shift = t.map_or(0.0, |t| 1.0 / t);
    let op = EllipticOperator::diffusion(&g, &coef.a, shift);
    let pre = SpectralPreconditioner::new(&g, op.mean_a(), shift, false);
    let rhs = corrector_rhs(coef, i);
    let out = pcg(
        &|u, o| op.apply(u, o),
        &|r, z| pre.apply(r, z),
        &rhs,
        opts.tol,
        opts.cap(&g),
        t.is_none(),
    )?;
    let phi = ScalarField { grid: g, values: out.x };
    let grad_phi = gradient(&phi, &BoundaryCondition::Periodic)?;
    Ok(CorrectorSolution { phi, grad_phi, iterations: out.iterations, residual: out.residual })
}

/// Spatial means of `a (e_i + grad φ_i)`, i.e. the single-realization
/// estimate of `ā e_i` (component `j` at index `j`).
pub fn flux_mean(coef: &CoefficientSet, i: usize, grad_phi: &VectorField) -> Vec<f64> {
    let n = coef.grid.cells() as f64;
    (0..coef.grid.d())
        .map(|j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            coef.a[j].iter().zip(&grad_phi.comps[j]).map(|(a, g)| a * (delta + g)).sum::<f64>() / n
        })
        .collect()
}

/// `q_i = a (e_i + grad φ_i) - ā e_i` on faces; `a_bar_col[j] = (ā e_i)_j`.
pub fn flux(coef: &CoefficientSet, i: usize, grad_phi: &VectorField, a_bar_col: &[f64]) -> VectorField {
    let g = coef.grid;
    let comps = (0..g.d())
        .map(|j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            coef.a[j]
                .iter()
                .zip(&grad_phi.comps[j])
                .map(|(a, gp)| a * (delta + gp) - a_bar_col[j])
                .collect()
        })
        .collect();
    VectorField { grid: g, comps }
}

#[derive(Debug, Clone)]
pub struct FluxCorrector {
    pub sigma: SkewTensorField,
    /// Mean of each flux component, removed before the solve.
    pub q_mean: Vec<f64>,
}

/// Solves `-Δ σ_jk + σ_jk / T = D⁺_j q_k - D⁺_k q_j` for every pair `j < k`
/// by spectral inversion, after centring `q`.
pub fn solve_flux_corrector(q: &VectorField, t: Regularization) -> Result<FluxCorrector> {
    let g = q.grid;
    if let Some(t) = t {
        if !(t > 0.0) {
            return Err(HomlabError::invalid("regularization T must be positive"));
        }
    }
    let q_mean = q.component_means();
    let h = g.h();
    let fft = FftNd::new(&g);
    let shift = t.map_or(0.0, |t| 1.0 / t);
    let inv: Vec<f64> = laplacian_symbol(&g)
        .iter()
        .map(|&s| if s + shift > 0.0 { 1.0 / (s + shift) } else { 0.0 })
        .collect();
    let mut sigma = SkewTensorField::zeros(&g);
    for j in 0..g.d() {
        for k in j + 1..g.d() {
            // centring does not change differences, but keeps the data honest
            let qk = &q.comps[k];
            let qj = &q.comps[j];
            let rhs: Vec<f64> = (0..g.cells())
                .map(|lin| {
                    let dj = (qk[g.neighbor(lin, j, 1)] - qk[lin]) / h;
                    let dk = (qj[g.neighbor(lin, k, 1)] - qj[lin]) / h;
                    dj - dk
                })
                .collect();
            let mut spec = fft.forward_real(&rhs);
            for (z, &w) in spec.iter_mut().zip(&inv) {
                *z *= w;
            }
            fft.inverse(&mut spec);
            let out = sigma.pair_mut(j, k);
            for (o, z) in out.iter_mut().zip(&spec) {
                *o = z.re;
            }
        }
    }
    Ok(FluxCorrector { sigma, q_mean })
}

/// `(div σ)_j = Σ_k D⁻_k σ_jk`, face-valued.
pub fn sigma_divergence(sigma: &SkewTensorField) -> VectorField {
    let g = sigma.grid;
    let h = g.h();
    let mut out = VectorField::zeros(&g);
    for j in 0..g.d() {
        for k in 0..g.d() {
            if k == j {
                continue;
            }
            for lin in 0..g.cells() {
                let dn = g.neighbor(lin, k, -1);
                out.comps[j][lin] += (sigma.get(j, k, lin) - sigma.get(j, k, dn)) / h;
            }
        }
    }
    out
}

/// `max |Σ_k D⁻_k σ_jk - (q_j - mean q_j)|` over faces and components.
pub fn divergence_identity_check(sigma: &SkewTensorField, q: &VectorField) -> Result<f64> {
    sigma.grid.ensure_same(&q.grid)?;
    let div = sigma_divergence(sigma);
    let means = q.component_means();
    let mut worst = 0.0f64;
    for j in 0..q.grid.d() {
        for lin in 0..q.grid.cells() {
            worst = worst.max((div.comps[j][lin] - (q.comps[j][lin] - means[j])).abs());
        }
    }
    Ok(worst)
}

/// Correctors, fluxes and flux correctors for every direction of one realization.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub grid: GridSpec,
    pub t: Regularization,
    pub phi: Vec<ScalarField>,
    pub grad_phi: Vec<VectorField>,
    pub q: Vec<VectorField>,
    pub sigma: Vec<SkewTensorField>,
    /// `q_mean[i][j]`: mean of `q_ij` before centring.
    pub q_mean: Vec<Vec<f64>>,
    /// `a_bar[i][j] = (ā e_i)_j` used to form the fluxes.
    pub a_bar: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    pub residuals: Vec<f64>,
}

impl CorrectorSet {
    /// Solves all directions. When `a_bar` is `None` the realization's own
    /// spatial flux mean is used, making every `q_i` mean-zero.
    pub fn compute(coef: &CoefficientSet, a_bar: Option<&[Vec<f64>]>, t: Regularization, opts: &SolveOptions) -> Result<Self> {
        let g = coef.grid;
        let d = g.d();
        let mut set = CorrectorSet {
            grid: g,
            t,
            phi: Vec::with_capacity(d),
            grad_phi: Vec::with_capacity(d),
            q: Vec::with_capacity(d),
            sigma: Vec::with_capacity(d),
            q_mean: Vec::with_capacity(d),
            a_bar: Vec::with_capacity(d),
            iterations: Vec::with_capacity(d),
            residuals: Vec::with_capacity(d),
        };
        for i in 0..d {
            let sol = solve_corrector(coef, i, t, opts)?;
            let col = match a_bar {
                Some(m) => m[i].clone(),
                None => flux_mean(coef, i, &sol.grad_phi),
            };
            let q = flux(coef, i, &sol.grad_phi, &col);
            let fc = solve_flux_corrector(&q, t)?;
            set.phi.push(sol.phi);
            set.grad_phi.push(sol.grad_phi);
            set.q.push(q);
            set.sigma.push(fc.sigma);
            set.q_mean.push(fc.q_mean);
            set.a_bar.push(col);
            set.iterations.push(sol.iterations);
            set.residuals.push(sol.residual);
        }
        Ok(set)
    }

    /// Per-realization moments.
    pub fn moments(&self) -> CorrectorMoments {
        let g = &self.grid;
        let d = g.d();
        let n = g.cells() as f64;
        let mut phi_sq = vec![0.0; g.cells()];
        for p in &self.phi {
            for (s, v) in phi_sq.iter_mut().zip(&p.values) {
                *s += v * v;
            }
        }
        let phi2 = phi_sq.iter().sum::<f64>() / n;
        let phi_critical = (d >= 3).then(|| {
            let p = 2.0 * d as f64 / (d as f64 - 2.0);
            phi_sq.iter().map(|s| s.powf(p / 2.0)).sum::<f64>() / n
        });
        let sigma2 = self.sigma.iter().map(|s| s.mean_square()).sum();
        let grad2 = self
            .grad_phi
            .iter()
            .enumerate()
            .map(|(i, gp)| {
                gp.comps
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        c.iter().map(|v| (delta + v) * (delta + v)).sum::<f64>() / n
                    })
                    .sum::<f64>()
            })
            .sum();
        CorrectorMoments { phi2, phi_critical, sigma2, grad2 }
    }

    /// Largest Euclidean norm of the cell-averaged `grad φ_i` over cells and directions.
    pub fn max_grad_phi(&self) -> f64 {
        let mut worst = 0.0f64;
        for gp in &self.grad_phi {
            let cells = gp.to_cells();
            for lin in 0..self.grid.cells() {
                let s: f64 = cells.iter().map(|c| c[lin] * c[lin]).sum();
                worst = worst.max(s.sqrt());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectorMoments {
    /// `⨏ |φ|^2`, `φ = (φ_1, …, φ_d)`.
    pub phi2: f64,
    /// `⨏ |φ|^{2d/(d-2)}` for `d >= 3`.
    pub phi_critical: Option<f64>,
    /// `⨏ |σ|^2` summed over all `i, j, k`.
    pub sigma2: f64,
    /// `Σ_i ⨏ |e_i + grad φ_i|^2`.
    pub grad2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    pub epsilon: f64,
    pub phi2: Estimate,
    pub phi_critical: Option<Estimate>,
    pub sigma2: Estimate,
    pub grad2: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub points: Vec<MomentPoint>,
    pub phi2_fit: Option<LineFit>,
    pub phi_critical_fit: Option<LineFit>,
    pub sigma2_fit: Option<LineFit>,
}

/// Ensemble moments per `ε` and their log-log slopes in `ε`.
pub fn moment_diagnostics(sweep: &[(f64, Vec<CorrectorMoments>)]) -> Result<MomentReport> {
    let mut points = Vec::with_capacity(sweep.len());
    for (eps, samples) in sweep {
        if samples.len() < 8 {
            return Err(HomlabError::invalid(format!(
                "moment diagnostics need at least 8 samples, got {} at eps = {eps}",
                samples.len()
            )));
        }
        let pick = |f: &dyn Fn(&CorrectorMoments) -> f64| Estimate::from_samples(&samples.iter().map(f).collect::<Vec<_>>());
        let phi_critical = samples
            .iter()
            .map(|m| m.phi_critical)
            .collect::<Option<Vec<f64>>>()
            .map(|v| Estimate::from_samples(&v));
        points.push(MomentPoint {
            epsilon: *eps,
            phi2: pick(&|m| m.phi2),
            phi_critical,
            sigma2: pick(&|m| m.sigma2),
            grad2: pick(&|m| m.grad2),
        });
    }
    let mut eps: Vec<f64> = points.iter().map(|p| p.epsilon).collect();
    eps.dedup();
    let fit = |ys: Vec<Option<f64>>| -> Option<LineFit> {
        if eps.len() < 2 {
            return None;
        }
        let ys: Option<Vec<f64>> = ys.into_iter().collect();
        let ys = ys?;
        if ys.iter().any(|&y| !(y > 0.0)) {
            return None;
        }
        let lx: Vec<f64> = points.iter().map(|p| p.epsilon.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        ols(&lx, &ly)
    };
    let phi2_fit = fit(points.iter().map(|p| Some(p.phi2.mean)).collect());
    let phi_critical_fit = fit(points.iter().map(|p| p.phi_critical.map(|e| e.mean)).collect());
    let sigma2_fit = fit(points.iter().map(|p| Some(p.sigma2.mean)).collect());
    Ok(MomentReport { points, phi2_fit, phi_critical_fit, sigma2_fit })
}

/// Sensitivity of `φ_i` to a perturbation of `ω` by `t` on the ball
/// `B_ε(center)`: `‖grad δφ‖² / ‖(e_i + grad φ_i) 1_B‖²` with
/// `δφ = (φ(ω + t 1_B) - φ(ω)) / t`.
pub fn parameter_derivative_ratio(
    param: &ParameterField,
    params: &CoefficientParams,
    center: &[f64],
    eps: f64,
    i: usize,
    t: f64,
    opts: &SolveOptions,
) -> Result<f64> {
    let base = crate::field::coefficient_map(param, params)?;
    let g = base.grid;
    let inside = |x: &[f64]| -> bool {
        let dx = g.periodic_delta(x, center);
        dx.iter().take(g.d()).map(|v| v * v).sum::<f64>() <= eps * eps
    };
    // the affine map is applied directly so the perturbed field may leave [1, λ] by O(t)
    let mut pert = base.clone();
    for j in 0..g.d() {
        for lin in 0..g.cells() {
            if inside(&g.face_center(lin, j)) {
                pert.a[j][lin] = params.diffusion(param.faces[j][lin] + t);
            }
        }
    }
    let s0 = solve_corrector(&base, i, None, opts)?;
    let s1 = solve_corrector(&pert, i, None, opts)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..g.d() {
        let delta = if i == j { 1.0 } else { 0.0 };
        for lin in 0..g.cells() {
            let dg = (s1.grad_phi.comps[j][lin] - s0.grad_phi.comps[j][lin]) / t;
            num += dg * dg;
            if inside(&g.face_center(lin, j)) {
                let e = delta + s0.grad_phi.comps[j][lin];
                den += e * e;
            }
        }
    }
    if den == 0.0 {
        return Err(HomlabError::Degenerate("perturbation ball contains no faces".into()));
    }
    Ok(num / den)
}

/// `⨏_{B_R} |φ|^2 / R^2` for growing `R` around the origin (finite-size
/// sublinearity trend; reported, not asserted).
pub fn sublinearity_trend(set: &CorrectorSet, radii: &[f64]) -> Vec<(f64, f64)> {
    let g = &set.grid;
    let origin = [0.0; MAX_DIM];
    radii
        .iter()
        .map(|&r| {
            let mut s = 0.0;
            let mut count = 0usize;
            for lin in 0..g.cells() {
                let dx = g.periodic_delta(&g.cell_center(lin), &origin);
                if dx.iter().map(|v| v * v).sum::<f64>() <= r * r {
                    s += set.phi.iter().map(|p| p.values[lin].powi(2)).sum::<f64>();
                    count += 1;
                }
            }
            let avg = if count > 0 { s / count as f64 } else { 0.0 };
            (r, avg / (r * r))
        })
        .collect()
}

/// Relative `L²` distance between two correctors.
pub fn relative_distance(a: &ScalarField, b: &ScalarField) -> f64 {
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let den = lp_norm(&b.grid, &b.values, 2.0);
    if den == 0.0 {
        lp_norm(&a.grid, &diff, 2.0)
    } else {
        lp_norm(&a.grid, &diff, 2.0) / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn laminate(g: &GridSpec) -> CoefficientSet {
        CoefficientSet::from_fns(g, |x| 2.0 + (2.0 * PI * x[0]).sin(), |_| vec![0.0; g.d()], 3.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn constant_coefficients_need_no_corrector() {
        let g = GridSpec::unit(2, 16).unwrap();
        let coef = CoefficientSet::constant(&g, 2.5, &[0.0, 0.0], 3.0, 1.0).unwrap();
        let set = CorrectorSet::compute(&coef, None, None, &SolveOptions::default()).unwrap();
        for i in 0..2 {
            assert!(set.phi[i].max_abs() == 0.0);
            assert!(set.q[i].comps.iter().flatten().all(|&v| v == 0.0));
            assert_eq!(set.a_bar[i][i], 2.5);
        }
        let m = set.moments();
        assert_eq!(m.phi2, 0.0);
        assert_eq!(m.sigma2, 0.0);
    }

    #[test]
    fn laminate_corrector_matches_ode() {
        let g = GridSpec::unit(2, 128).unwrap();
        let coef = laminate(&g);
        let s1 = solve_corrector(&coef, 0, None, &SolveOptions::default()).unwrap();
        let mut worst = 0.0f64;
        for lin in 0..g.cells() {
            let x = g.face_center(lin, 0)[0];
            let exact = 3f64.sqrt() / (2.0 + (2.0 * PI * x).sin()) - 1.0;
            worst = worst.max((s1.grad_phi.comps[0][lin] - exact).abs());
        }
        assert!(worst < 1e-3, "{worst}");
        assert!(s1.phi.mean().abs() < 1e-12);
        let s2 = solve_corrector(&coef, 1, None, &SolveOptions::default()).unwrap();
        assert!(s2.phi.max_abs() < 1e-12);
    }

    #[test]
    fn laminate_flux_is_constant() {
        let g = GridSpec::unit(2, 128).unwrap();
        let coef = laminate(&g);
        let s = solve_corrector(&coef, 0, None, &SolveOptions::default()).unwrap();
        let q = flux(&coef, 0, &s.grad_phi, &[3f64.sqrt(), 0.0]);
        let worst = q.comps[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn sigma_of_single_mode() {
        let g = GridSpec::unit(2, 64).unwrap();
        let h = g.h();
        let mut q = VectorField::zeros(&g);
        for lin in 0..g.cells() {
            q.comps[1][lin] = (2.0 * PI * g.face_center(lin, 1)[0]).sin();
        }
        let fc = solve_flux_corrector(&q, None).unwrap();
        let mut worst = 0.0f64;
        for lin in 0..g.cells() {
            let x = g.edge_center(lin, 0, 1)[0];
            let expect = (2.0 * PI * x).cos() / (2.0 * PI);
            worst = worst.max((fc.sigma.pair(0, 1)[lin] - expect).abs());
        }
        assert!(worst < 2.0 * h * h, "{worst}");
        let res = divergence_identity_check(&fc.sigma, &q).unwrap();
        assert!(res < 1e-12, "{res}");
    }

    #[test]
    fn zero_flux_gives_zero_sigma() {
        let g = GridSpec::unit(3, 8).unwrap();
        let q = VectorField::zeros(&g);
        let fc = solve_flux_corrector(&q, None).unwrap();
        assert_eq!(divergence_identity_check(&fc.sigma, &q).unwrap(), 0.0);
        assert_eq!(fc.sigma.mean_square(), 0.0);
    }

    #[test]
    fn massive_corrector_approaches_periodic_one() {
        let g = GridSpec::unit(2, 32).unwrap();
        let coef = CoefficientSet::from_fns(
            &g,
            |x| 2.0 + (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos(),
            |_| vec![0.0, 0.0],
            3.0,
            0.0,
            1.0,
        )
        .unwrap();
        let exact = solve_corrector(&coef, 0, None, &SolveOptions::default()).unwrap();
        let mut last = f64::INFINITY;
        for t in [1.0, 10.0, 100.0] {
            let s = solve_corrector(&coef, 0, Some(t), &SolveOptions::default()).unwrap();
            let dist = relative_distance(&s.phi, &exact.phi);
            assert!(dist < last);
            last = dist;
        }
        assert!(last < 0.05);
    }
}
