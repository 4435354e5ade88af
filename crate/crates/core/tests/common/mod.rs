//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

/// Gauss–Hermite rule for the weight `exp(-x²)`: Newton iteration on the
/// orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E[tanh(s X) tanh(s Y)]` for standard normals with correlation `rho`.
pub struct TanhCovariance {
    x: Vec<f64>,
    w: Vec<f64>,
    s: f64,
}

impl TanhCovariance {
    pub fn new(std_dev: f64) -> Self {
        let (x, w) = gauss_hermite(64);
        let x = x.iter().map(|v| v * 2f64.sqrt()).collect();
        let w = w.iter().map(|v| v / PI.sqrt()).collect();
        TanhCovariance { x, w, s: std_dev }
    }

    pub fn at(&self, rho: f64) -> f64 {
        let c = (1.0 - rho * rho).max(0.0).sqrt();
        let mut total = 0.0;
        for (xi, wi) in self.x.iter().zip(&self.w) {
            let tx = (self.s * xi).tanh();
            let inner: f64 = self.x.iter().zip(&self.w).map(|(zj, wj)| wj * (self.s * (rho * xi + c * zj)).tanh()).sum();
            total += wi * tx * inner;
        }
        total
    }
}

/// Squared-exponential kernel `exp(-r²/2ε²)` on one axis, summed over the
/// periodic images of a torus of length `l`.
pub fn se_axis(dx: f64, eps: f64, l: f64) -> f64 {
    (-20..=20).map(|m| {
        let y = dx + m as f64 * l;
        (-y * y / (2.0 * eps * eps)).exp()
    })
    .sum()
}

/// Table `c[a][b]` of the squashed-field covariance at cell lag `(a, b)`,
/// `0 <= a, b < n`, of a d=2 squared-exponential field on the unit torus.
pub fn squashed_lag_table_2d(n: usize, eps: f64) -> Vec<Vec<f64>> {
    let h = 1.0 / n as f64;
    let axis: Vec<f64> = (0..n).map(|a| se_axis(a as f64 * h, eps, 1.0)).collect();
    let var = axis[0] * axis[0];
    let tc = TanhCovariance::new(var.sqrt());
    (0..n).map(|a| (0..n).map(|b| tc.at(axis[a] * axis[b] / var)).collect()).collect()
}

/// `Var[Σ_c w_c ω_c / |box|]` over a `side × side` box of cells starting at
/// `(x0, y0)`, from a lag table of the squashed field.
pub fn weighted_box_variance(table: &[Vec<f64>], n: usize, x0: usize, y0: usize, side: usize, w: impl Fn(usize, usize) -> f64) -> f64 {
    let mut cells = Vec::with_capacity(side * side);
    for i in x0..x0 + side {
        for j in y0..y0 + side {
            cells.push((i, j, w(i, j)));
        }
    }
    let mut s = 0.0;
    for &(i, j, wa) in &cells {
        for &(k, l, wb) in &cells {
            s += wa * wb * table[(i + n - k) % n][(j + n - l) % n];
        }
    }
    s / (cells.len() * cells.len()) as f64
}

pub fn log_slope(x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    (y1 / y0).ln() / (x1 / x0).ln()
}

/// One PASS/FAIL line per acceptance criterion.
pub fn report(id: u32, name: &str, passed: bool, detail: &str) {
    println!("criterion {id:>2} [{name}]: {} | {detail}", if passed { "PASS" } else { "FAIL" });
}

pub fn sci(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", "))
}
