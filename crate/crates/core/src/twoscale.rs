//! Manufactured macroscopic solutions, the two-scale expansion
//! `w = u₀ + φ_i ∂_i u₀`, and the splitting of its operator residual.

use serde::{Deserialize, Serialize};

use crate::calculus::{apply_operator, divergence, lp_norm, BoundaryCondition, ScalarField, VectorField};
use crate::corrector::CorrectorSet;
use crate::error::{HomlabError, Result};
use crate::field::CoefficientSet;
use crate::grid::{GridSpec, MAX_DIM};
use crate::homog::{HomogenizedCoefficients, GammaField};
use crate::stats::{ols, Estimate, LineFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum U0Kind {
    /// `Π_j sin(2π x_j / L)`
    Sines,
    /// `(1 - |x - c|²/R²)^4` inside `|x - c| < R`, `c` the domain centre, `R = L/4`.
    Bump,
    /// `sin(2π x_1 / L)`
    SineX1,
}

/// Analytic `u₀` with exact first and second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum MacroFunction {
    Sines { d: usize, length: f64 },
    SineX1 { length: f64 },
    Bump { d: usize, center: [f64; MAX_DIM], radius: f64, period: Option<f64> },
    Constant(f64),
}

impl MacroFunction {
    /// The standard choice of `kind` on `grid`; `periodic` wraps the bump.
    pub fn of_kind(kind: U0Kind, grid: &GridSpec, periodic: bool) -> Self {
        let l = grid.length();
        match kind {
            U0Kind::Sines => MacroFunction::Sines { d: grid.d(), length: l },
            U0Kind::SineX1 => MacroFunction::SineX1 { length: l },
            U0Kind::Bump => {
                let mut center = [0.0; MAX_DIM];
                for c in center.iter_mut().take(grid.d()) {
                    *c = 0.5 * l;
                }
                MacroFunction::Bump { d: grid.d(), center, radius: 0.25 * l, period: periodic.then_some(l) }
            }
        }
    }

    /// Diameter of the support (infinite for non-compact functions).
    pub fn support_diameter(&self) -> f64 {
        match self {
            MacroFunction::Bump { radius, .. } => 2.0 * radius,
            _ => f64::INFINITY,
        }
    }

    fn bump_offset(d: usize, center: &[f64; MAX_DIM], period: Option<f64>, x: &[f64]) -> [f64; MAX_DIM] {
        let mut y = [0.0; MAX_DIM];
        for j in 0..d {
            let mut v = x[j] - center[j];
            if let Some(l) = period {
                v -= l * (v / l).round();
            }
            y[j] = v;
        }
        y
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            MacroFunction::Sines { d, length } => {
                let k = 2.0 * std::f64::consts::PI / length;
                (0..*d).map(|j| (k * x[j]).sin()).product()
            }
            MacroFunction::SineX1 { length } => (2.0 * std::f64::consts::PI / length * x[0]).sin(),
            MacroFunction::Bump { d, center, radius, period } => {
                let y = Self::bump_offset(*d, center, *period, x);
                let s = 1.0 - y.iter().map(|v| v * v).sum::<f64>() / (radius * radius);
                if s > 0.0 { s.powi(4) } else { 0.0 }
            }
            MacroFunction::Constant(c) => *c,
        }
    }

    pub fn gradient(&self, x: &[f64]) -> [f64; MAX_DIM] {
        let mut g = [0.0; MAX_DIM];
        match self {
            MacroFunction::Sines { d, length } => {
                let k = 2.0 * std::f64::consts::PI / length;
                for j in 0..*d {
                    g[j] = (0..*d)
                        .map(|i| if i == j { k * (k * x[i]).cos() } else { (k * x[i]).sin() })
                        .product();
                }
            }
            MacroFunction::SineX1 { length } => {
                let k = 2.0 * std::f64::consts::PI / length;
                g[0] = k * (k * x[0]).cos();
            }
            MacroFunction::Bump { d, center, radius, period } => {
                let y = Self::bump_offset(*d, center, *period, x);
                let r2 = radius * radius;
                let s = 1.0 - y.iter().map(|v| v * v).sum::<f64>() / r2;
                if s > 0.0 {
                    for j in 0..*d {
                        g[j] = -8.0 * s.powi(3) * y[j] / r2;
                    }
                }
            }
            MacroFunction::Constant(_) => {}
        }
        g
    }

    pub fn hessian(&self, x: &[f64]) -> [[f64; MAX_DIM]; MAX_DIM] {
        let mut hm = [[0.0; MAX_DIM]; MAX_DIM];
        match self {
            MacroFunction::Sines { d, length } => {
                let k = 2.0 * std::f64::consts::PI / length;
                for j in 0..*d {
                    for l in 0..*d {
                        hm[j][l] = (0..*d)
                            .map(|i| {
                                let (s, c) = (k * x[i]).sin_cos();
                                match (i == j, i == l) {
                                    (true, true) => -k * k * s,
                                    (true, false) | (false, true) => k * c,
                                    (false, false) => s,
                                }
                            })
                            .product();
                    }
                }
            }
            MacroFunction::SineX1 { length } => {
                let k = 2.0 * std::f64::consts::PI / length;
                hm[0][0] = -k * k * (k * x[0]).sin();
            }
            MacroFunction::Bump { d, center, radius, period } => {
                let y = Self::bump_offset(*d, center, *period, x);
                let r2 = radius * radius;
                let s = 1.0 - y.iter().map(|v| v * v).sum::<f64>() / r2;
                if s > 0.0 {
                    for j in 0..*d {
                        for l in 0..*d {
                            let delta = if j == l { 1.0 } else { 0.0 };
                            hm[j][l] = 48.0 * s * s * y[j] * y[l] / (r2 * r2) - 8.0 * s.powi(3) * delta / r2;
                        }
                    }
                }
            }
            MacroFunction::Constant(_) => {}
        }
        hm
    }

    pub fn sample(&self, grid: &GridSpec) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.value(x))
    }

    /// `∂_i u₀` at cell centres, one array per direction.
    pub fn sample_gradient(&self, grid: &GridSpec) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; grid.cells()]; grid.d()];
        for lin in 0..grid.cells() {
            let g = self.gradient(&grid.cell_center(lin));
            for (i, o) in out.iter_mut().enumerate() {
                o[lin] = g[i];
            }
        }
        out
    }

    /// `‖grad u₀‖_{L²}` and `‖grad u₀‖_{H¹}` by midpoint quadrature on `grid`.
    pub fn gradient_norms(&self, grid: &GridSpec) -> (f64, f64) {
        let d = grid.d();
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for lin in 0..grid.cells() {
            let x = grid.cell_center(lin);
            let g = self.gradient(&x);
            let hm = self.hessian(&x);
            let gg: f64 = g.iter().take(d).map(|v| v * v).sum();
            let hh: f64 = (0..d).flat_map(|j| (0..d).map(move |l| (j, l))).map(|(j, l)| hm[j][l] * hm[j][l]).sum();
            l2 += gg;
            h1 += gg + hh;
        }
        let v = grid.cell_volume();
        ((l2 * v).sqrt(), (h1 * v).sqrt())
    }
}

/// Values of `u₀` on the grid extended by one ghost layer, indexed by
/// `(c_0 + 1, …, c_{d-1} + 1)` in row-major order over `n + 2` points per axis.
struct Extended {
    m: usize,
    d: usize,
    values: Vec<f64>,
}

impl Extended {
    fn new(u0: &MacroFunction, grid: &GridSpec, periodic: bool) -> Self {
        let d = grid.d();
        let n = grid.n();
        let m = n + 2;
        let h = grid.h();
        let l = grid.length();
        let total = m.pow(d as u32);
        let mut values = Vec::with_capacity(total);
        for e in 0..total {
            let mut rem = e;
            let mut x = [0.0; MAX_DIM];
            for axis in (0..d).rev() {
                let c = (rem % m) as f64 - 1.0;
                rem /= m;
                let mut v = (c + 0.5) * h;
                if periodic {
                    v = v.rem_euclid(l);
                }
                x[axis] = v;
            }
            values.push(u0.value(&x));
        }
        Extended { m, d, values }
    }

    #[inline]
    fn at(&self, c: &[usize; MAX_DIM], off: &[isize; MAX_DIM]) -> f64 {
        let mut idx = 0usize;
        for axis in 0..self.d {
            idx = idx * self.m + (c[axis] as isize + 1 + off[axis]) as usize;
        }
        self.values[idx]
    }
}

/// `Ā_h u₀ = -Σ ā_jk D_j D_k u₀ + b̄·D u₀ + Λ u₀` with second differences on the
/// diagonal and centred cross differences off it; `u₀` is evaluated on a ghost
/// layer (wrapped when `periodic`).
pub fn apply_homogenized(hc: &HomogenizedCoefficients, zero_order: f64, u0: &MacroFunction, grid: &GridSpec, periodic: bool) -> ScalarField {
    let d = grid.d();
    let h = grid.h();
    let ext = Extended::new(u0, grid, periodic);
    let mut out = ScalarField::zeros(grid);
    let zero = [0isize; MAX_DIM];
    crate::grid::for_each_cell(grid, |lin, c| {
        let uc = ext.at(c, &zero);
        let mut v = zero_order * uc;
        for j in 0..d {
            let mut p = zero;
            p[j] = 1;
            let mut q = zero;
            q[j] = -1;
            let up = ext.at(c, &p);
            let dn = ext.at(c, &q);
            v -= hc.a_bar[j][j] * (up - 2.0 * uc + dn) / (h * h);
            v += hc.b_bar[j] * (up - dn) / (2.0 * h);
            for k in 0..d {
                if k == j || hc.a_bar[j][k] == 0.0 {
                    continue;
                }
                let mut cross = 0.0;
                for (sj, sk, sign) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                    let mut o = zero;
                    o[j] = sj;
                    o[k] = sk;
                    cross += sign * ext.at(c, &o);
                }
                v -= hc.a_bar[j][k] * cross / (4.0 * h * h);
            }
        }
        out.values[lin] = v;
    });
    out
}

/// `w = u₀ + Σ_i φ_i ∂_i u₀` on cells.
pub fn two_scale_expansion(u0: &MacroFunction, set: &CorrectorSet) -> ScalarField {
    let g = set.grid;
    let mut w = u0.sample(&g);
    for lin in 0..g.cells() {
        let du = u0.gradient(&g.cell_center(lin));
        for (i, phi) in set.phi.iter().enumerate() {
            w.values[lin] += phi.values[lin] * du[i];
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub r: f64,
    pub r1: f64,
    pub r2: f64,
    /// Term from the realization's flux means, `-Σ m_ij ∂_j ∂_i u₀`.
    pub r_mean: f64,
    pub identity_residual: f64,
    /// `‖Σ_i σ_i grad ∂_i u₀‖` (faces).
    pub sigma_term: f64,
    /// `‖Σ_i φ_i grad ∂_i u₀‖` on faces and on cells.
    pub phi_hess_face: f64,
    pub phi_hess_cell: f64,
    /// `‖Σ_i φ_i ∂_i u₀‖`.
    pub phi_grad: f64,
}

impl ResidualNorms {
    /// `‖R‖ ≤ ‖σ grad ∂u₀‖ + λ ‖φ grad ∂u₀‖` and
    /// `‖r1‖ ≤ K ‖φ grad ∂u₀‖ + Λ ‖φ ∂u₀‖`.
    pub fn triangle_bounds_hold(&self, lambda: f64, drift_bound: f64, zero_order: f64) -> bool {
        let slack = 1e-12;
        self.r <= (self.sigma_term + lambda * self.phi_hess_face) * (1.0 + slack) + slack
            && self.r1 <= (drift_bound * self.phi_hess_cell + zero_order * self.phi_grad) * (1.0 + slack) + slack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    /// `R_k = Σ_i (σ_ikj ∂_j ∂_i u₀ - a φ_i ∂_k ∂_i u₀)` on `k`-faces.
    pub r: VectorField,
    /// `Σ_i φ_i (b·grad ∂_i u₀ + Λ ∂_i u₀)`.
    pub r1: ScalarField,
    /// `Σ_i Γ_i ∂_i u₀`.
    pub r2: ScalarField,
    pub r_mean: ScalarField,
    pub norms: ResidualNorms,
}

/// Assembles `R`, `r1`, `r2` for one realization on the torus and measures
/// `‖A_h w - Ā_h u₀ - div_h R - r1 - r2 - r_mean‖_{L²}`.
pub fn residuals(
    coef: &CoefficientSet,
    set: &CorrectorSet,
    gamma: &GammaField,
    u0: &MacroFunction,
    hc: &HomogenizedCoefficients,
) -> Result<ResidualSet> {
    let g = coef.grid;
    g.ensure_same(&set.grid)?;
    let d = g.d();
    let n = g.cells();
    let mut r = VectorField::zeros(&g);
    let mut s_face = VectorField::zeros(&g);
    let mut p_face = VectorField::zeros(&g);
    for k in 0..d {
        for lin in 0..n {
            let up = g.neighbor(lin, k, 1);
            let hm = u0.hessian(&g.face_center(lin, k));
            let mut s = 0.0;
            let mut p = 0.0;
            for i in 0..d {
                let phi_face = 0.5 * (set.phi[i].values[lin] + set.phi[i].values[up]);
                p += phi_face * hm[k][i];
                for j in 0..d {
                    if j == k {
                        continue;
                    }
                    let sig = &set.sigma[i];
                    let edge = 0.5 * (sig.get(k, j, lin) + sig.get(k, j, g.neighbor(lin, j, -1)));
                    s += edge * hm[j][i];
                }
            }
            s_face.comps[k][lin] = s;
            p_face.comps[k][lin] = p;
            r.comps[k][lin] = s - coef.a[k][lin] * p;
        }
    }
    let mut r1 = ScalarField::zeros(&g);
    let mut r2 = ScalarField::zeros(&g);
    let mut r_mean = ScalarField::zeros(&g);
    let mut phi_hess_cell = 0.0;
    let mut phi_grad = 0.0;
    for lin in 0..n {
        let x = g.cell_center(lin);
        let du = u0.gradient(&x);
        let hm = u0.hessian(&x);
        let b = coef.drift_at(lin);
        let mut ph = [0.0; MAX_DIM];
        let mut pg = 0.0;
        let mut rg = 0.0;
        let mut rm = 0.0;
        for i in 0..d {
            let phi = set.phi[i].values[lin];
            for j in 0..d {
                ph[j] += phi * hm[j][i];
                rm -= set.q_mean[i][j] * hm[j][i];
            }
            pg += phi * du[i];
            rg += gamma.gamma[i].values[lin] * du[i];
        }
        let bph: f64 = (0..d).map(|j| b[j] * ph[j]).sum();
        r1.values[lin] = bph + coef.zero_order * pg;
        r2.values[lin] = rg;
        r_mean.values[lin] = rm;
        phi_hess_cell += ph.iter().map(|v| v * v).sum::<f64>();
        phi_grad += pg * pg;
    }
    let w = two_scale_expansion(u0, set);
    let (aw, _) = apply_operator(coef, &w, &BoundaryCondition::Periodic)?;
    let au0 = apply_homogenized(hc, coef.zero_order, u0, &g, true);
    let div_r = divergence(&r);
    let diff: Vec<f64> = (0..n)
        .map(|lin| aw.values[lin] - au0.values[lin] - div_r.values[lin] - r1.values[lin] - r2.values[lin] - r_mean.values[lin])
        .collect();
    let vol = g.cell_volume();
    let norms = ResidualNorms {
        r: r.l2_norm(),
        r1: lp_norm(&g, &r1.values, 2.0),
        r2: lp_norm(&g, &r2.values, 2.0),
        r_mean: lp_norm(&g, &r_mean.values, 2.0),
        identity_residual: lp_norm(&g, &diff, 2.0),
        sigma_term: s_face.l2_norm(),
        phi_hess_face: p_face.l2_norm(),
        phi_hess_cell: (phi_hess_cell * vol).sqrt(),
        phi_grad: (phi_grad * vol).sqrt(),
    };
    Ok(ResidualSet { r, r1, r2, r_mean, norms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub epsilon: f64,
    /// `‖R‖ + ‖r1‖`
    pub r_plus_r1: Estimate,
    pub r2: Estimate,
    pub identity_residual: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualScalingReport {
    pub points: Vec<ResidualPoint>,
    /// `None` when every residual vanishes.
    pub r_plus_r1_fit: Option<LineFit>,
    pub r2_fit: Option<LineFit>,
    pub exact_zero: bool,
}

/// Log-log slopes in `ε` of the ensemble-mean residual norms.
pub fn residual_scaling(sweep: &[(f64, Vec<ResidualNorms>)]) -> Result<ResidualScalingReport> {
    let mut eps: Vec<f64> = sweep.iter().map(|(e, _)| *e).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    if eps.len() < 2 {
        return Err(HomlabError::invalid("residual scaling needs at least two distinct epsilon values"));
    }
    let points: Vec<ResidualPoint> = sweep
        .iter()
        .map(|(e, s)| ResidualPoint {
            epsilon: *e,
            r_plus_r1: Estimate::from_samples(&s.iter().map(|n| n.r + n.r1).collect::<Vec<_>>()),
            r2: Estimate::from_samples(&s.iter().map(|n| n.r2).collect::<Vec<_>>()),
            identity_residual: Estimate::from_samples(&s.iter().map(|n| n.identity_residual).collect::<Vec<_>>()),
        })
        .collect();
    let exact_zero = points.iter().all(|p| p.r_plus_r1.mean == 0.0 && p.r2.mean == 0.0);
    let fit = |ys: Vec<f64>| -> Option<LineFit> {
        if ys.iter().any(|&y| !(y > 0.0)) {
            return None;
        }
        let lx: Vec<f64> = points.iter().map(|p| p.epsilon.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        ols(&lx, &ly)
    };
    Ok(ResidualScalingReport {
        r_plus_r1_fit: fit(points.iter().map(|p| p.r_plus_r1.mean).collect()),
        r2_fit: fit(points.iter().map(|p| p.r2.mean).collect()),
        points,
        exact_zero,
    })
}
