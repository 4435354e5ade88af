//! Dyadic cube partitions, cube averages, the scaled Poincaré check and the
//! per-cube variance of averaged drift fluctuations.

use serde::{Deserialize, Serialize};

use crate::calculus::ScalarField;
use crate::error::{HomlabError, Result};
use crate::grid::{GridSpec, MAX_DIM};
use crate::homog::GammaField;
use crate::stats::{multi_ols, sample_variance, variance_with_se, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IotaChoice {
    pub ideal: f64,
    pub used: f64,
}

/// Rounds `ε^{d/(d+2)}` to the nearest `L / 2^k`, enlarged if needed so that
/// `ι >= ε`; rejects grids on which `ι < 2h`.
pub fn choose_iota(eps: f64, grid: &GridSpec) -> Result<IotaChoice> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(HomlabError::invalid(format!("epsilon must lie in (0, 1], got {eps}")));
    }
    let d = grid.d() as f64;
    let l = grid.length();
    let ideal = eps.powf(d / (d + 2.0));
    let mut k = (l / ideal).log2().round().max(0.0) as i32;
    while k > 0 && l / 2f64.powi(k) < eps {
        k -= 1;
    }
    let used = l / 2f64.powi(k);
    if used < 2.0 * grid.h() {
        return Err(HomlabError::GridTooCoarse { n: grid.n(), minimal_n: 1usize << (k + 1) });
    }
    Ok(IotaChoice { ideal, used })
}

/// Tiling of the grid by cubes of `m^d` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CubePartition {
    pub grid: GridSpec,
    pub iota: f64,
    pub iota_ideal: f64,
    /// Cells per cube side.
    pub m: usize,
    /// Cubes per axis.
    pub k: usize,
}

impl CubePartition {
    pub fn new(grid: &GridSpec, iota: f64) -> Result<Self> {
        let m_f = iota / grid.h();
        let m = m_f.round() as usize;
        if m == 0 || (m_f - m as f64).abs() > 1e-9 * m_f || grid.n() % m != 0 {
            return Err(HomlabError::invalid(format!(
                "cube side {iota} is not a divisor of the domain in whole cells (h = {})",
                grid.h()
            )));
        }
        Ok(CubePartition { grid: *grid, iota, iota_ideal: iota, m, k: grid.n() / m })
    }

    pub fn from_choice(grid: &GridSpec, choice: IotaChoice) -> Result<Self> {
        let mut p = Self::new(grid, choice.used)?;
        p.iota_ideal = choice.ideal;
        Ok(p)
    }

    pub fn cube_count(&self) -> usize {
        self.k.pow(self.grid.d() as u32)
    }

    pub fn cells_per_cube(&self) -> usize {
        self.m.pow(self.grid.d() as u32)
    }

    #[inline]
    pub fn cube_of(&self, lin: usize) -> usize {
        let c = self.grid.coords(lin);
        (0..self.grid.d()).fold(0, |acc, axis| acc * self.k + c[axis] / self.m)
    }

    pub fn cube_coords(&self, cube: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        let mut rem = cube;
        for axis in (0..self.grid.d()).rev() {
            out[axis] = rem % self.k;
            rem /= self.k;
        }
        out
    }

    /// Per-cube means of cell values.
    pub fn averages(&self, values: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.cube_count()];
        for (lin, v) in values.iter().enumerate() {
            sums[self.cube_of(lin)] += v;
        }
        let per = self.cells_per_cube() as f64;
        sums.iter().map(|s| s / per).collect()
    }
}

pub fn cube_average(v: &ScalarField, part: &CubePartition) -> Result<Vec<f64>> {
    v.grid.ensure_same(&part.grid)?;
    Ok(part.averages(&v.values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub max_ratio: f64,
    pub skipped: usize,
    /// `μ(1) (1 + 10 h/ι)` with `μ(1) = √d / π`.
    pub bound: f64,
    pub holds: bool,
}

/// `max_z ‖v - (v)_z‖_{L²(z)} / (ι ‖grad v‖_{L²(z)})`, counting only faces
/// interior to each cube. Cubes with zero gradient are skipped.
pub fn poincare_check(v: &ScalarField, part: &CubePartition) -> Result<PoincareReport> {
    v.grid.ensure_same(&part.grid)?;
    let g = &part.grid;
    let h = g.h();
    let means = part.averages(&v.values);
    let nc = part.cube_count();
    let mut dev = vec![0.0; nc];
    let mut grad = vec![0.0; nc];
    for lin in 0..g.cells() {
        let z = part.cube_of(lin);
        dev[z] += (v.values[lin] - means[z]).powi(2);
        let c = g.coords(lin);
        for axis in 0..g.d() {
            if (c[axis] + 1) % part.m != 0 {
                let up = g.neighbor(lin, axis, 1);
                grad[z] += ((v.values[up] - v.values[lin]) / h).powi(2);
            }
        }
    }
    let mut max_ratio = 0.0f64;
    let mut skipped = 0;
    for z in 0..nc {
        if grad[z] <= 0.0 {
            skipped += 1;
            continue;
        }
        max_ratio = max_ratio.max(dev[z].sqrt() / (part.iota * grad[z].sqrt()));
    }
    let bound = (g.d() as f64).sqrt() / std::f64::consts::PI * (1.0 + 10.0 * h / part.iota);
    Ok(PoincareReport { max_ratio, skipped, bound, holds: max_ratio <= bound })
}

/// Cube averages of `Σ_i Γ_i ∂_i u₀` for one realization.
pub fn gamma_cube_means(gamma: &GammaField, du0: &[Vec<f64>], part: &CubePartition) -> Vec<f64> {
    let n = part.grid.cells();
    let f: Vec<f64> = (0..n)
        .map(|lin| gamma.gamma.iter().zip(du0).map(|(g, u)| g.values[lin] * u[lin]).sum())
        .collect();
    part.averages(&f)
}

/// `‖grad u₀‖²_{L²(z)}` per cube, from cell values of `∂_i u₀`.
pub fn cube_gradient_energy(du0: &[Vec<f64>], part: &CubePartition) -> Vec<f64> {
    let n = part.grid.cells();
    let sq: Vec<f64> = (0..n).map(|lin| du0.iter().map(|u| u[lin] * u[lin]).sum()).collect();
    let vol = part.iota.powi(part.grid.d() as i32);
    part.averages(&sq).into_iter().map(|m| m * vol).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeStat {
    pub cube: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_err: f64,
    pub grad_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedPoint {
    pub epsilon: f64,
    pub iota_ideal: f64,
    pub iota: f64,
    pub samples: usize,
    pub cubes: Vec<CubeStat>,
    /// `Σ_z Var_z / Σ_z ‖grad u₀‖²_{L²(z)}` over cubes with non-zero energy.
    pub pooled: Estimate,
    /// Mean correlation between cube averages of axis-0 neighbours.
    pub neighbour_correlation: f64,
}

/// Ensemble statistics of cube averages. `cube_means[s][z]` is the average
/// over cube `z` in sample `s`.
pub fn cube_statistics(
    epsilon: f64,
    part: &CubePartition,
    cube_means: &[Vec<f64>],
    grad_energy: &[f64],
) -> Result<LocalizedPoint> {
    let m = cube_means.len();
    if m < 2 {
        return Err(HomlabError::invalid("need at least two samples"));
    }
    let nc = part.cube_count();
    let mut cubes = Vec::with_capacity(nc);
    let mut num = 0.0;
    let mut num_se2 = 0.0;
    let mut den = 0.0;
    for z in 0..nc {
        let xs: Vec<f64> = cube_means.iter().map(|s| s[z]).collect();
        let v = variance_with_se(&xs);
        let mean = xs.iter().sum::<f64>() / m as f64;
        if grad_energy[z] > 0.0 {
            num += v.mean;
            num_se2 += v.std_err * v.std_err;
            den += grad_energy[z];
        }
        cubes.push(CubeStat { cube: z, mean, variance: v.mean, std_err: v.std_err, grad_energy: grad_energy[z] });
    }
    let pooled = if den > 0.0 {
        Estimate { mean: num / den, std_err: num_se2.sqrt() / den, n: m }
    } else {
        Estimate { mean: 0.0, std_err: 0.0, n: m }
    };
    let mut corr_sum = 0.0;
    let mut corr_n = 0usize;
    if part.k > 1 {
        let stride = part.k.pow(part.grid.d() as u32 - 1);
        for z in 0..nc {
            let c = part.cube_coords(z);
            if c[0] + 1 == part.k {
                continue;
            }
            let w = z + stride;
            let xs: Vec<f64> = cube_means.iter().map(|s| s[z]).collect();
            let ys: Vec<f64> = cube_means.iter().map(|s| s[w]).collect();
            let (vx, vy) = (sample_variance(&xs), sample_variance(&ys));
            if vx > 0.0 && vy > 0.0 {
                let mx = xs.iter().sum::<f64>() / m as f64;
                let my = ys.iter().sum::<f64>() / m as f64;
                let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (m - 1) as f64;
                corr_sum += cov / (vx * vy).sqrt();
                corr_n += 1;
            }
        }
    }
    Ok(LocalizedPoint {
        epsilon,
        iota_ideal: part.iota_ideal,
        iota: part.iota,
        samples: m,
        cubes,
        pooled,
        neighbour_correlation: if corr_n > 0 { corr_sum / corr_n as f64 } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedReport {
    pub points: Vec<LocalizedPoint>,
    /// Exponents of the pooled normalized variance in `ε` and `ι`.
    pub eps_exponent: Option<f64>,
    pub iota_exponent: Option<f64>,
}

/// Fits `log pooled = α log ε + β log ι + c` over a sweep of `(ε, ι)`.
pub fn localized_variance_check(points: Vec<LocalizedPoint>) -> Result<LocalizedReport> {
    let distinct = |f: &dyn Fn(&LocalizedPoint) -> f64| {
        let mut v: Vec<f64> = points.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(&|p| p.epsilon) < 2 || distinct(&|p| p.iota) < 2 {
        return Ok(LocalizedReport { points, eps_exponent: None, iota_exponent: None });
    }
    if points.iter().any(|p| !(p.pooled.mean > 0.0)) {
        return Ok(LocalizedReport { points, eps_exponent: None, iota_exponent: None });
    }
    let rows: Vec<Vec<f64>> = points.iter().map(|p| vec![p.epsilon.ln(), p.iota.ln()]).collect();
    let y: Vec<f64> = points.iter().map(|p| p.pooled.mean.ln()).collect();
    let coef = multi_ols(&rows, &y);
    Ok(LocalizedReport {
        eps_exponent: coef.as_ref().map(|c| c[0]),
        iota_exponent: coef.as_ref().map(|c| c[1]),
        points,
    })
}
