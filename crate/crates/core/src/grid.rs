//! Uniform cubic grids on `[0, L)^d`.
//!
//! Cells are stored in row-major order (last axis fastest). A value attached
//! to "face `j` of cell `c`" lives at `x_c + h/2 e_j`, i.e. between cell `c`
//! and its upper neighbour along axis `j`. Edge-valued quantities for an axis
//! pair `(j, k)` live at `x_c + h/2 (e_j + e_k)`.

use serde::{Deserialize, Serialize};

use crate::error::{HomlabError, Result};

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    d: usize,
    n: usize,
    length: f64,
}

impl GridSpec {
    pub fn new(d: usize, n: usize, length: f64) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&d) {
            return Err(HomlabError::invalid(format!("dimension {d} not in 1..=3")));
        }
        if n < 2 || !n.is_power_of_two() {
            return Err(HomlabError::invalid(format!(
                "cells per dimension must be a power of two >= 2, got {n}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(HomlabError::invalid(format!("side length must be positive, got {length}")));
        }
        Ok(GridSpec { d, n, length })
    }

    /// Unit-length grid.
    pub fn unit(d: usize, n: usize) -> Result<Self> {
        Self::new(d, n, 1.0)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn h(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Number of cells, `n^d`.
    pub fn cells(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    pub fn volume(&self) -> f64 {
        self.length.powi(self.d as i32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.d - 1 - axis) as u32)
    }

    pub fn strides(&self) -> [usize; MAX_DIM] {
        let mut s = [0; MAX_DIM];
        for (axis, v) in s.iter_mut().enumerate().take(self.d) {
            *v = self.stride(axis);
        }
        s
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .take(self.d)
            .fold(0, |acc, &c| acc * self.n + c)
    }

    pub fn coords(&self, mut lin: usize) -> [usize; MAX_DIM] {
        let mut c = [0; MAX_DIM];
        for axis in (0..self.d).rev() {
            c[axis] = lin % self.n;
            lin /= self.n;
        }
        c
    }

    /// Periodic neighbour of `lin` along `axis`, `offset` in {-1, +1}.
    #[inline]
    pub fn neighbor(&self, lin: usize, axis: usize, offset: isize) -> usize {
        let s = self.stride(axis);
        let c = (lin / s) % self.n;
        if offset > 0 {
            if c + 1 == self.n {
                lin + s - self.n * s
            } else {
                lin + s
            }
        } else if c == 0 {
            lin + self.n * s - s
        } else {
            lin - s
        }
    }

    /// Periodic shift of `lin` by an arbitrary integer offset per axis.
    pub fn shifted(&self, lin: usize, offsets: &[isize]) -> usize {
        let c = self.coords(lin);
        let n = self.n as isize;
        let mut out = 0usize;
        for axis in 0..self.d {
            let o = offsets.get(axis).copied().unwrap_or(0);
            let v = (c[axis] as isize + o).rem_euclid(n) as usize;
            out = out * self.n + v;
        }
        out
    }

    pub fn cell_center(&self, lin: usize) -> [f64; MAX_DIM] {
        let c = self.coords(lin);
        let h = self.h();
        let mut x = [0.0; MAX_DIM];
        for axis in 0..self.d {
            x[axis] = (c[axis] as f64 + 0.5) * h;
        }
        x
    }

    pub fn face_center(&self, lin: usize, axis: usize) -> [f64; MAX_DIM] {
        let mut x = self.cell_center(lin);
        x[axis] += 0.5 * self.h();
        x
    }

    pub fn edge_center(&self, lin: usize, j: usize, k: usize) -> [f64; MAX_DIM] {
        let mut x = self.cell_center(lin);
        x[j] += 0.5 * self.h();
        x[k] += 0.5 * self.h();
        x
    }

    /// Minimum-image separation vector on the torus.
    pub fn periodic_delta(&self, a: &[f64], b: &[f64]) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for axis in 0..self.d {
            let mut dx = a[axis] - b[axis];
            dx -= self.length * (dx / self.length).round();
            out[axis] = dx;
        }
        out
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.d == other.d && self.n == other.n && (self.length - other.length).abs() == 0.0
    }

    /// Grid on a domain `factor` times longer per side with the same spacing.
    pub fn tiled(&self, factor: usize) -> Result<Self> {
        GridSpec::new(self.d, self.n * factor, self.length * factor as f64)
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(HomlabError::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Visits every cell with its coordinates, in storage order.
pub fn for_each_cell(grid: &GridSpec, mut f: impl FnMut(usize, &[usize; MAX_DIM])) {
    let n = grid.n();
    let d = grid.d();
    let mut c = [0usize; MAX_DIM];
    for lin in 0..grid.cells() {
        f(lin, &c);
        let mut axis = d;
        while axis > 0 {
            axis -= 1;
            c[axis] += 1;
            if c[axis] < n {
                break;
            }
            c[axis] = 0;
        }
    }
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
