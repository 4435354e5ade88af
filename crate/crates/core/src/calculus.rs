//! Staggered finite-volume calculus and Krylov solvers.
//!
//! Scalars live at cell centres, vector fields on faces (component `j` at the
//! upper `j`-face of each cell), skew tensors on edges. The gradient is a
//! forward difference and the divergence a backward difference, so they are
//! exact negative adjoints on the torus.
//!
//! On Dirichlet grids the unknowns are the `n^d` interior cells of `[0, L]^d`
//! and the boundary data is imposed through one layer of ghost cells whose
//! values are the data evaluated at the ghost centres.

use serde::{Deserialize, Serialize};

use crate::error::{HomlabError, Result, Warning};
use crate::fft::{dirichlet_laplacian_symbol, laplacian_symbol, DstNd, FftNd};
use crate::field::CoefficientSet;
use crate::grid::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        ScalarField { grid: *grid, values: vec![0.0; grid.cells()] }
    }

    pub fn from_values(grid: &GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(HomlabError::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.cells()
            )));
        }
        Ok(ScalarField { grid: *grid, values })
    }

    /// Samples `f` at cell centres.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.cells()).map(|lin| f(&grid.cell_center(lin))).collect();
        ScalarField { grid: *grid, values }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Face-valued vector field: `comps[j][c]` sits at `x_c + h/2 e_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    pub comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        VectorField { grid: *grid, comps: vec![vec![0.0; grid.cells()]; grid.d()] }
    }

    /// Samples component `j` of `f` at the `j`-faces.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(usize, &[f64]) -> f64) -> Self {
        let comps = (0..grid.d())
            .map(|j| (0..grid.cells()).map(|lin| f(j, &grid.face_center(lin, j))).collect())
            .collect();
        VectorField { grid: *grid, comps }
    }

    pub fn component_means(&self) -> Vec<f64> {
        self.comps
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// `⟨F, G⟩ = Σ_faces F·G h^d`.
    pub fn dot(&self, other: &VectorField) -> f64 {
        let s: f64 = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        s * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Average of the two faces bracketing each cell, per component.
    pub fn to_cells(&self) -> Vec<Vec<f64>> {
        let g = &self.grid;
        self.comps
            .iter()
            .enumerate()
            .map(|(j, c)| (0..g.cells()).map(|lin| 0.5 * (c[lin] + c[g.neighbor(lin, j, -1)])).collect())
            .collect()
    }
}

/// Skew tensor stored once per axis pair `j < k`, at edge centres
/// `x_c + h/2 (e_j + e_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewTensorField {
    pub grid: GridSpec,
    pairs: Vec<Vec<f64>>,
}

pub fn pair_count(d: usize) -> usize {
    d * (d - 1) / 2
}

/// Position of the pair `(j, k)`, `j < k`, in lexicographic order.
pub fn pair_index(d: usize, j: usize, k: usize) -> usize {
    debug_assert!(j < k && k < d);
    (0..j).map(|r| d - 1 - r).sum::<usize>() + (k - j - 1)
}

impl SkewTensorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        SkewTensorField { grid: *grid, pairs: vec![vec![0.0; grid.cells()]; pair_count(grid.d())] }
    }

    /// Component `(j, k)` at cell `lin`; `-(k, j)` when `j > k`, zero on the diagonal.
    #[inline]
    pub fn get(&self, j: usize, k: usize, lin: usize) -> f64 {
        let d = self.grid.d();
        match j.cmp(&k) {
            std::cmp::Ordering::Less => self.pairs[pair_index(d, j, k)][lin],
            std::cmp::Ordering::Greater => -self.pairs[pair_index(d, k, j)][lin],
            std::cmp::Ordering::Equal => 0.0,
        }
    }

    pub fn pair(&self, j: usize, k: usize) -> &[f64] {
        &self.pairs[pair_index(self.grid.d(), j, k)]
    }

    pub fn pair_mut(&mut self, j: usize, k: usize) -> &mut Vec<f64> {
        let d = self.grid.d();
        &mut self.pairs[pair_index(d, j, k)]
    }

    /// `Σ_{j,k} ⨏ σ_jk^2` (each stored pair counted twice).
    pub fn mean_square(&self) -> f64 {
        let n = self.grid.cells() as f64;
        2.0 * self.pairs.iter().flatten().map(|v| v * v).sum::<f64>() / n
    }
}

/// Ghost-cell values of Dirichlet data, one array per axis and side indexed
/// by the transverse cell index.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletData {
    pub grid: GridSpec,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

/// Index of `lin` with the `axis` coordinate removed.
#[inline]
pub fn transverse_index(grid: &GridSpec, lin: usize, axis: usize) -> usize {
    let s = grid.stride(axis);
    (lin / (s * grid.n())) * s + lin % s
}

impl DirichletData {
    pub fn zero(grid: &GridSpec) -> Self {
        let m = grid.cells() / grid.n();
        DirichletData {
            grid: *grid,
            lower: vec![vec![0.0; m]; grid.d()],
            upper: vec![vec![0.0; m]; grid.d()],
        }
    }

    /// Evaluates `g` at the centres of the ghost cells just outside `[0, L]^d`.
    pub fn from_fn(grid: &GridSpec, g: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut data = Self::zero(grid);
        let h = grid.h();
        let n = grid.n();
        for axis in 0..grid.d() {
            for lin in 0..grid.cells() {
                let c = grid.coords(lin);
                if c[axis] == 0 {
                    let mut x = grid.cell_center(lin);
                    x[axis] -= h;
                    data.lower[axis][transverse_index(grid, lin, axis)] = g(&x);
                }
                if c[axis] == n - 1 {
                    let mut x = grid.cell_center(lin);
                    x[axis] += h;
                    data.upper[axis][transverse_index(grid, lin, axis)] = g(&x);
                }
            }
        }
        if data.lower.iter().chain(&data.upper).flatten().any(|v| !v.is_finite()) {
            return Err(HomlabError::invalid("Dirichlet data must be finite"));
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition {
    Periodic,
    Dirichlet(DirichletData),
}

impl BoundaryCondition {
    pub fn is_periodic(&self) -> bool {
        matches!(self, BoundaryCondition::Periodic)
    }

    fn check(&self, grid: &GridSpec) -> Result<()> {
        if let BoundaryCondition::Dirichlet(data) = self {
            grid.ensure_same(&data.grid)?;
        }
        Ok(())
    }
}

/// Forward-difference gradient. On Dirichlet grids the top faces use the
/// upper ghost values; the bottom boundary faces are not stored.
pub fn gradient(u: &ScalarField, bc: &BoundaryCondition) -> Result<VectorField> {
    bc.check(&u.grid)?;
    let g = &u.grid;
    let h = g.h();
    let n = g.n();
    let mut out = VectorField::zeros(g);
    for j in 0..g.d() {
        let s = g.stride(j);
        for lin in 0..g.cells() {
            let up = match bc {
                BoundaryCondition::Dirichlet(data) if (lin / s) % n == n - 1 => {
                    data.upper[j][transverse_index(g, lin, j)]
                }
                _ => u.values[g.neighbor(lin, j, 1)],
            };
            out.comps[j][lin] = (up - u.values[lin]) / h;
        }
    }
    Ok(out)
}

/// Backward-difference divergence on the torus, the negative adjoint of
/// [`gradient`].
pub fn divergence(f: &VectorField) -> ScalarField {
    let g = &f.grid;
    let h = g.h();
    let mut out = ScalarField::zeros(g);
    for (j, comp) in f.comps.iter().enumerate() {
        for lin in 0..g.cells() {
            out.values[lin] += (comp[lin] - comp[g.neighbor(lin, j, -1)]) / h;
        }
    }
    out
}

/// `⟨u, v⟩ = Σ u v h^d`.
pub fn inner(grid: &GridSpec, u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() * grid.cell_volume()
}

/// Matrix-free `-div(a grad u) + b·grad u + c u` with `a` on faces, `b` on
/// cells and a scalar zero-order coefficient. Applied with homogeneous ghost
/// values; Dirichlet data enters through [`EllipticOperator::boundary_term`].
#[derive(Debug, Clone, Copy)]
pub struct EllipticOperator<'a> {
    pub grid: GridSpec,
    pub a: &'a [Vec<f64>],
    pub b: Option<&'a [Vec<f64>]>,
    pub zero_order: f64,
    pub dirichlet: bool,
}

impl<'a> EllipticOperator<'a> {
    pub fn new(coef: &'a CoefficientSet, bc: &BoundaryCondition) -> Self {
        EllipticOperator {
            grid: coef.grid,
            a: &coef.a,
            b: if coef.has_drift() { Some(&coef.b) } else { None },
            zero_order: coef.zero_order,
            dirichlet: !bc.is_periodic(),
        }
    }

    /// Symmetric periodic part `-div(a grad) + c` (corrector operator).
    pub fn diffusion(grid: &GridSpec, a: &'a [Vec<f64>], zero_order: f64) -> Self {
        EllipticOperator { grid: *grid, a, b: None, zero_order, dirichlet: false }
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let n = g.n();
        let h = g.h();
        let ih2 = 1.0 / (h * h);
        let ih2c = 0.5 / h;
        for (o, &v) in out.iter_mut().zip(u) {
            *o = self.zero_order * v;
        }
        for j in 0..g.d() {
            let s = g.stride(j);
            let block = n * s;
            let aj = &self.a[j];
            let bj = self.b.map(|b| &b[j]);
            for base in (0..g.cells()).step_by(block) {
                for cj in 0..n {
                    let row = base + cj * s;
                    let up_row = if cj + 1 < n { row + s } else { base };
                    let dn_row = if cj > 0 { row - s } else { base + (n - 1) * s };
                    let up_ghost = self.dirichlet && cj + 1 == n;
                    let dn_ghost = self.dirichlet && cj == 0;
                    for o in 0..s {
                        let lin = row + o;
                        let uc = u[lin];
                        let uu = if up_ghost { 0.0 } else { u[up_row + o] };
                        let ud = if dn_ghost { 0.0 } else { u[dn_row + o] };
                        let ap = aj[lin];
                        let am = aj[dn_row + o];
                        let mut v = (ap * (uc - uu) + am * (uc - ud)) * ih2;
                        if let Some(bj) = bj {
                            v += bj[lin] * (uu - ud) * ih2c;
                        }
                        out[lin] += v;
                    }
                }
            }
        }
    }

    /// Contribution of the ghost values, so that the full affine operator is
    /// `apply(u) + boundary_term(data)`.
    pub fn boundary_term(&self, data: &DirichletData) -> Vec<f64> {
        let g = &self.grid;
        let n = g.n();
        let h = g.h();
        let mut out = vec![0.0; g.cells()];
        for j in 0..g.d() {
            let s = g.stride(j);
            for lin in 0..g.cells() {
                let cj = (lin / s) % n;
                let bj = self.b.map_or(0.0, |b| b[j][lin]);
                if cj + 1 == n {
                    let gv = data.upper[j][transverse_index(g, lin, j)];
                    out[lin] += -self.a[j][lin] * gv / (h * h) + bj * gv / (2.0 * h);
                }
                if cj == 0 {
                    let gv = data.lower[j][transverse_index(g, lin, j)];
                    let am = self.a[j][g.neighbor(lin, j, -1)];
                    out[lin] += -am * gv / (h * h) - bj * gv / (2.0 * h);
                }
            }
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let g = &self.grid;
        let ih2 = 1.0 / (g.h() * g.h());
        let mut diag = vec![self.zero_order; g.cells()];
        for j in 0..g.d() {
            for (lin, v) in diag.iter_mut().enumerate() {
                *v += (self.a[j][lin] + self.a[j][g.neighbor(lin, j, -1)]) * ih2;
            }
        }
        diag
    }

    pub fn mean_a(&self) -> f64 {
        let total: f64 = self.a.iter().flatten().sum();
        total / (self.grid.cells() * self.grid.d()) as f64
    }
}

/// `-div(a grad u) + b·grad u + Λ u` including Dirichlet ghost contributions,
/// with a warning when the grid Péclet number reaches 1.
pub fn apply_operator(coef: &CoefficientSet, u: &ScalarField, bc: &BoundaryCondition) -> Result<(ScalarField, Vec<Warning>)> {
    coef.grid.ensure_same(&u.grid)?;
    bc.check(&u.grid)?;
    let op = EllipticOperator::new(coef, bc);
    let mut out = vec![0.0; u.grid.cells()];
    op.apply(&u.values, &mut out);
    if let BoundaryCondition::Dirichlet(data) = bc {
        for (o, t) in out.iter_mut().zip(op.boundary_term(data)) {
            *o += t;
        }
    }
    Ok((ScalarField { grid: u.grid, values: out }, peclet_warning(coef).into_iter().collect()))
}

pub fn peclet_warning(coef: &CoefficientSet) -> Option<Warning> {
    let pe = coef.peclet();
    (pe >= 1.0).then(|| Warning::new("peclet", format!("grid Peclet number {pe:.3} >= 1; monotonicity not guaranteed")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    None,
    Jacobi,
    /// Constant-coefficient inverse `(-ā Δ_h + c)^{-1}` by FFT (torus) or
    /// sine transform (Dirichlet), with `ā` the mean face coefficient.
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    /// Defaults to `50 n d`.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: None, preconditioner: Preconditioner::Spectral }
    }
}

impl SolveOptions {
    pub fn jacobi() -> Self {
        SolveOptions { preconditioner: Preconditioner::Jacobi, ..Self::default() }
    }

    pub fn cap(&self, grid: &GridSpec) -> usize {
        self.max_iter.unwrap_or(50 * grid.n() * grid.d())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub u: ScalarField,
    pub iterations: usize,
    pub residual: f64,
    pub warnings: Vec<Warning>,
}

enum Transform {
    Periodic(FftNd),
    Dirichlet(DstNd),
}

/// Fast constant-coefficient approximate inverse.
pub struct SpectralPreconditioner {
    transform: Transform,
    inv_symbol: Vec<f64>,
}

impl SpectralPreconditioner {
    /// Modes where `a_ref σ + shift` vanishes are zeroed (projection onto
    /// mean-zero fields when `shift = 0` on the torus).
    pub fn new(grid: &GridSpec, a_ref: f64, shift: f64, dirichlet: bool) -> Self {
        let (transform, sym) = if dirichlet {
            (Transform::Dirichlet(DstNd::new(grid)), dirichlet_laplacian_symbol(grid))
        } else {
            (Transform::Periodic(FftNd::new(grid)), laplacian_symbol(grid))
        };
        let inv_symbol = sym
            .iter()
            .map(|&s| {
                let den = a_ref * s + shift;
                if den > 0.0 { 1.0 / den } else { 0.0 }
            })
            .collect();
        SpectralPreconditioner { transform, inv_symbol }
    }

    pub fn apply(&self, r: &[f64], out: &mut [f64]) {
        match &self.transform {
            Transform::Periodic(fft) => {
                let mut spec = fft.forward_real(r);
                for (z, &w) in spec.iter_mut().zip(&self.inv_symbol) {
                    *z *= w;
                }
                fft.inverse(&mut spec);
                for (o, z) in out.iter_mut().zip(&spec) {
                    *o = z.re;
                }
            }
            Transform::Dirichlet(dst) => {
                out.copy_from_slice(r);
                dst.transform(out);
                let scale = dst.inverse_scale();
                for (o, &w) in out.iter_mut().zip(&self.inv_symbol) {
                    *o *= w * scale;
                }
                dst.transform(out);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nrm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}

pub struct KrylovOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Right-preconditioned BiCGStab. Convergence is judged on the true residual
/// `‖b - A x‖ / ‖b‖`; on stagnation of the recurrence the method restarts.
pub fn bicgstab(
    apply: &dyn Fn(&[f64], &mut [f64]),
    precond: &dyn Fn(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<KrylovOutcome> {
    let len = b.len();
    let bn = nrm(b);
    if bn == 0.0 {
        return Ok(KrylovOutcome { x: vec![0.0; len], iterations: 0, residual: 0.0 });
    }
    let mut x = vec![0.0; len];
    let mut r = b.to_vec();
    let mut history = Vec::new();
    let mut it = 0;
    let (mut p, mut v, mut y, mut s, mut z, mut t) =
        (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    while it < max_iter {
        let r_hat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        p.iter_mut().for_each(|e| *e = 0.0);
        v.iter_mut().for_each(|e| *e = 0.0);
        while it < max_iter {
            it += 1;
            let rho_new = dot(&r_hat, &r);
            if rho_new.abs() < 1e-300 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            for i in 0..len {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            precond(&p, &mut y);
            apply(&y, &mut v);
            let rv = dot(&r_hat, &v);
            if rv.abs() < 1e-300 {
                break;
            }
            alpha = rho_new / rv;
            for i in 0..len {
                s[i] = r[i] - alpha * v[i];
            }
            if nrm(&s) <= tol * bn {
                for i in 0..len {
                    x[i] += alpha * y[i];
                }
                r.copy_from_slice(&s);
                history.push(nrm(&r) / bn);
                break;
            }
            precond(&s, &mut z);
            apply(&z, &mut t);
            let tt = dot(&t, &t);
            omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
            for i in 0..len {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            rho = rho_new;
            let rel = nrm(&r) / bn;
            history.push(rel);
            if rel <= tol {
                break;
            }
            if omega == 0.0 {
                break;
            }
        }
        // restart from the true residual if the recurrence drifted
        apply(&x, &mut t);
        for i in 0..len {
            r[i] = b[i] - t[i];
        }
        let rel = nrm(&r) / bn;
        if rel <= tol {
            return Ok(KrylovOutcome { x, iterations: it, residual: rel });
        }
    }
    let residual = {
        apply(&x, &mut t);
        (0..len).map(|i| (b[i] - t[i]).powi(2)).sum::<f64>().sqrt() / bn
    };
    Err(HomlabError::NonConvergence { iterations: it, residual, history })
}

/// Preconditioned conjugate gradients for a symmetric positive (semi)definite
/// operator. With `mean_zero` the right-hand side, the search directions and
/// the result are projected onto mean-zero vectors.
pub fn pcg(
    apply: &dyn Fn(&[f64], &mut [f64]),
    precond: &dyn Fn(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    max_iter: usize,
    mean_zero: bool,
) -> Result<KrylovOutcome> {
    let len = b.len();
    let mut r = b.to_vec();
    if mean_zero {
        project_mean(&mut r);
    }
    let bn = nrm(&r);
    let mut x = vec![0.0; len];
    if bn == 0.0 {
        return Ok(KrylovOutcome { x, iterations: 0, residual: 0.0 });
    }
    let mut z = vec![0.0; len];
    let mut q = vec![0.0; len];
    precond(&r, &mut z);
    if mean_zero {
        project_mean(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    for it in 1..=max_iter {
        apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            break;
        }
        let alpha = rz / pq;
        for i in 0..len {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if mean_zero {
            project_mean(&mut r);
        }
        let rel = nrm(&r) / bn;
        history.push(rel);
        if rel <= tol {
            apply(&x, &mut q);
            let mut tr: Vec<f64> = b.iter().zip(&q).map(|(bi, qi)| bi - qi).collect();
            if mean_zero {
                project_mean(&mut tr);
                project_mean(&mut x);
            }
            return Ok(KrylovOutcome { x, iterations: it, residual: nrm(&tr) / bn });
        }
        precond(&r, &mut z);
        if mean_zero {
            project_mean(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..len {
            p[i] = z[i] + beta * p[i];
        }
    }
    let residual = history.last().copied().unwrap_or(f64::INFINITY);
    Err(HomlabError::NonConvergence { iterations: history.len(), residual, history })
}

/// Solves `-div(a grad u) + b·grad u + Λ u = f` with the given boundary
/// condition. Requires `Λ >= K^2 + 1`.
pub fn solve(coef: &CoefficientSet, f: &ScalarField, bc: &BoundaryCondition, opts: &SolveOptions) -> Result<Solution> {
    coef.grid.ensure_same(&f.grid)?;
    bc.check(&f.grid)?;
    if !coef.is_coercive() {
        return Err(HomlabError::invalid(format!(
            "zero-order coefficient {} violates Lambda >= K^2 + 1",
            coef.zero_order
        )));
    }
    let op = EllipticOperator::new(coef, bc);
    let mut rhs = f.values.clone();
    if let BoundaryCondition::Dirichlet(data) = bc {
        for (r, t) in rhs.iter_mut().zip(op.boundary_term(data)) {
            *r -= t;
        }
    }
    let apply = |u: &[f64], out: &mut [f64]| op.apply(u, out);
    let cap = opts.cap(&f.grid);
    let outcome = match opts.preconditioner {
        Preconditioner::None => bicgstab(&apply, &|r, z| z.copy_from_slice(r), &rhs, opts.tol, cap)?,
        Preconditioner::Jacobi => {
            let inv: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
            let pre = |r: &[f64], z: &mut [f64]| {
                for i in 0..r.len() {
                    z[i] = r[i] * inv[i];
                }
            };
            bicgstab(&apply, &pre, &rhs, opts.tol, cap)?
        }
        Preconditioner::Spectral => {
            let sp = SpectralPreconditioner::new(&f.grid, op.mean_a(), coef.zero_order, !bc.is_periodic());
            bicgstab(&apply, &|r, z| sp.apply(r, z), &rhs, opts.tol, cap)?
        }
    };
    Ok(Solution {
        u: ScalarField { grid: f.grid, values: outcome.x },
        iterations: outcome.iterations,
        residual: outcome.residual,
        warnings: peclet_warning(coef).into_iter().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    L2,
    /// `L^{2d/(d-2)}`, defined for `d >= 3`.
    Critical,
    LInf,
}

impl NormKind {
    pub fn exponent(&self, d: usize) -> Result<f64> {
        match self {
            NormKind::L2 => Ok(2.0),
            NormKind::Critical if d >= 3 => Ok(2.0 * d as f64 / (d as f64 - 2.0)),
            NormKind::Critical => Err(HomlabError::invalid(format!("L^(2d/(d-2)) needs d >= 3, got d = {d}"))),
            NormKind::LInf => Ok(f64::INFINITY),
        }
    }

    pub fn label(&self, d: usize) -> String {
        match self {
            NormKind::L2 => "L2".into(),
            NormKind::Critical => format!("L{}", 2 * d / d.saturating_sub(2).max(1)),
            NormKind::LInf => "Linf".into(),
        }
    }
}

pub fn lp_norm(grid: &GridSpec, values: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    let s: f64 = values.iter().map(|v| v.abs().powf(p)).sum();
    (s * grid.cell_volume()).powf(1.0 / p)
}

pub fn norm(u: &ScalarField, kind: NormKind) -> Result<f64> {
    Ok(lp_norm(&u.grid, &u.values, kind.exponent(u.grid.d())?))
}

/// `‖grad u‖_{L^2}` over all faces; on Dirichlet grids the bottom boundary
/// faces (against the lower ghosts) are included.
pub fn seminorm_h1(u: &ScalarField, bc: &BoundaryCondition) -> Result<f64> {
    let grad = gradient(u, bc)?;
    let mut s: f64 = grad.comps.iter().flatten().map(|v| v * v).sum();
    if let BoundaryCondition::Dirichlet(data) = bc {
        let g = &u.grid;
        let h = g.h();
        for j in 0..g.d() {
            let st = g.stride(j);
            for lin in 0..g.cells() {
                if (lin / st) % g.n() == 0 {
                    let gv = data.lower[j][transverse_index(g, lin, j)];
                    s += ((u.values[lin] - gv) / h).powi(2);
                }
            }
        }
    }
    Ok((s * u.grid.cell_volume()).sqrt())
}
