//! Multidimensional complex FFT on periodic grids, built from 1-D `rustfft`
//! plans applied along each axis.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{for_each_cell, GridSpec};

#[derive(Clone)]
pub struct FftNd {
    grid: GridSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("grid", &self.grid).finish()
    }
}

impl FftNd {
    pub fn new(grid: &GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        FftNd {
            grid: *grid,
            forward: planner.plan_fft_forward(grid.n()),
            inverse: planner.plan_fft_inverse(grid.n()),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Unnormalized forward transform.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    /// Inverse transform including the `1/N` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
        let scale = 1.0 / data.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    pub fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.grid.cells());
        let plan = if inverse { &self.inverse } else { &self.forward };
        let n = self.grid.n();
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let mut block_buf: Vec<Complex64> = Vec::new();
        for axis in 0..self.grid.d() {
            let s = self.grid.stride(axis);
            if s == 1 {
                plan.process_with_scratch(data, &mut scratch);
                continue;
            }
            let block = n * s;
            block_buf.resize(block, Complex64::default());
            for chunk in data.chunks_mut(block) {
                // chunk is an n x s matrix; transpose so each axis line is contiguous
                for k in 0..n {
                    for o in 0..s {
                        block_buf[o * n + k] = chunk[k * s + o];
                    }
                }
                plan.process_with_scratch(&mut block_buf, &mut scratch);
                for k in 0..n {
                    for o in 0..s {
                        chunk[k * s + o] = block_buf[o * n + k];
                    }
                }
            }
        }
    }
}

/// Separable type-I discrete sine transform on the interior cells of a
/// Dirichlet grid (zero values one cell outside each boundary).
#[derive(Clone)]
pub struct DstNd {
    grid: GridSpec,
    plan: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for DstNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DstNd").field("grid", &self.grid).finish()
    }
}

impl DstNd {
    pub fn new(grid: &GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        DstNd {
            grid: *grid,
            plan: planner.plan_fft_forward(2 * (grid.n() + 1)),
        }
    }

    /// Unnormalized `X_k = sum_j x_j sin(pi (j+1)(k+1)/(n+1))` along every axis.
    /// Applying it twice multiplies by `((n+1)/2)^d`.
    pub fn transform(&self, data: &mut [f64]) {
        assert_eq!(data.len(), self.grid.cells());
        let n = self.grid.n();
        let len = 2 * (n + 1);
        let mut line = vec![Complex64::default(); len];
        let mut scratch = vec![Complex64::default(); self.plan.get_inplace_scratch_len()];
        for axis in 0..self.grid.d() {
            let s = self.grid.stride(axis);
            let block = n * s;
            for base in (0..data.len()).step_by(block) {
                for o in 0..s {
                    line[0] = Complex64::default();
                    line[n + 1] = Complex64::default();
                    for j in 0..n {
                        let v = data[base + j * s + o];
                        line[j + 1] = Complex64::new(v, 0.0);
                        line[len - 1 - j] = Complex64::new(-v, 0.0);
                    }
                    self.plan.process_with_scratch(&mut line, &mut scratch);
                    for k in 0..n {
                        data[base + k * s + o] = -0.5 * line[k + 1].im;
                    }
                }
            }
        }
    }

    pub fn inverse_scale(&self) -> f64 {
        (2.0 / (self.grid.n() + 1) as f64).powi(self.grid.d() as i32)
    }
}

/// Eigenvalues of `-Δ_h` with zero values one cell outside the grid, in
/// [`DstNd`] mode order.
pub fn dirichlet_laplacian_symbol(grid: &GridSpec) -> Vec<f64> {
    let h = grid.h();
    let n = grid.n();
    let one_d: Vec<f64> = (0..n)
        .map(|m| {
            let s = (std::f64::consts::PI * (m + 1) as f64 / (2 * (n + 1)) as f64).sin();
            4.0 * s * s / (h * h)
        })
        .collect();
    let mut out = vec![0.0; grid.cells()];
    let d = grid.d();
    for_each_cell(grid, |lin, c| {
        out[lin] = (0..d).map(|axis| one_d[c[axis]]).sum();
    });
    out
}

/// Signed frequency of DFT index `m` on `n` points.
#[inline]
pub fn wavenumber(m: usize, n: usize) -> isize {
    if m < n / 2 {
        m as isize
    } else {
        m as isize - n as isize
    }
}

/// Eigenvalues of the periodic 2d+1-point `-Δ_h`, one per DFT mode.
pub fn laplacian_symbol(grid: &GridSpec) -> Vec<f64> {
    let h = grid.h();
    let n = grid.n();
    let one_d: Vec<f64> = (0..n)
        .map(|m| {
            let s = (std::f64::consts::PI * m as f64 / n as f64).sin();
            4.0 * s * s / (h * h)
        })
        .collect();
    let mut out = vec![0.0; grid.cells()];
    let d = grid.d();
    for_each_cell(grid, |lin, c| {
        out[lin] = (0..d).map(|axis| one_d[c[axis]]).sum();
    });
    out
}
