//! Neumann Poisson solve on a box grid by red-black SOR.
//!
//! The discrete Laplacian uses ghost reflection at the faces, which makes it
//! symmetric under trapezoid weights; the compatible right-hand sides are the
//! ones with zero trapezoid mean, and the solution is fixed by the same gauge.

use thiserror::Error;

use crate::field::ScalarField;
use crate::grid::{Grid, MAX_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoissonError {
    #[error("Poisson solve did not converge in {iterations} iterations (last residual {last:e}, target {target:e})")]
    NoConvergence { iterations: usize, last: f64, target: f64, history: Vec<f64> },
    #[error("non-finite right-hand side")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonSettings {
    /// Max-norm residual target relative to `‖rho‖∞`.
    pub tol: f64,
    /// Iteration cap; `None` scales with the grid.
    pub max_iter: Option<usize>,
    /// Relaxation factor; `None` picks `2/(1+sin(πh))`.
    pub omega: Option<f64>,
}

impl Default for PoissonSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: None, omega: None }
    }
}

const CHECK_EVERY: usize = 8;

/// Trapezoid-weighted mean of a field.
pub fn trapezoid_mean(field: &ScalarField) -> f64 {
    let grid = field.grid();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, v) in field.values().iter().enumerate() {
        let w = grid.trapezoid_weight(&grid.multi_index(i));
        num += w * v;
        den += w;
    }
    num / den
}

fn subtract_mean(grid: &Grid, values: &mut [f64]) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, v) in values.iter().enumerate() {
        let w = grid.trapezoid_weight(&grid.multi_index(i));
        num += w * v;
        den += w;
    }
    let m = num / den;
    values.iter_mut().for_each(|v| *v -= m);
}

struct Stencil {
    n_dim: usize,
    shape: [usize; MAX_DIM],
    stride: [usize; MAX_DIM],
    inv_h2: [f64; MAX_DIM],
    diag: f64,
}

impl Stencil {
    fn new(grid: &Grid) -> Self {
        let n_dim = grid.n_dim();
        let mut shape = [1; MAX_DIM];
        let mut stride = [0; MAX_DIM];
        let mut inv_h2 = [0.0; MAX_DIM];
        for a in 0..n_dim {
            shape[a] = grid.shape()[a];
            stride[a] = grid.stride(a);
            inv_h2[a] = 1.0 / (grid.spacing(a) * grid.spacing(a));
        }
        let diag = 2.0 * inv_h2.iter().sum::<f64>();
        Self { n_dim, shape, stride, inv_h2, diag }
    }

    #[inline]
    fn neighbour_sum(&self, u: &[f64], idx: usize, k: &[usize; MAX_DIM]) -> f64 {
        let mut sum = 0.0;
        for a in 0..self.n_dim {
            let s = self.stride[a];
            let left = if k[a] > 0 { u[idx - s] } else { u[idx + s] };
            let right = if k[a] + 1 < self.shape[a] { u[idx + s] } else { u[idx - s] };
            sum += (left + right) * self.inv_h2[a];
        }
        sum
    }

    fn advance(&self, k: &mut [usize; MAX_DIM]) {
        for a in 0..self.n_dim {
            k[a] += 1;
            if k[a] < self.shape[a] {
                return;
            }
            k[a] = 0;
        }
    }
}

/// Ghost-reflection Neumann Laplacian of a node field.
pub fn neumann_laplacian(u: &ScalarField) -> ScalarField {
    let grid = *u.grid();
    let st = Stencil::new(&grid);
    let vals = u.values();
    let mut out = vec![0.0; vals.len()];
    let mut k = [0usize; MAX_DIM];
    for (idx, o) in out.iter_mut().enumerate() {
        *o = st.neighbour_sum(vals, idx, &k) - st.diag * vals[idx];
        st.advance(&mut k);
    }
    ScalarField::new(grid, out).expect("shape preserved")
}

fn residual_max(st: &Stencil, u: &[f64], rho: &[f64]) -> f64 {
    let mut k = [0usize; MAX_DIM];
    let mut r = 0.0f64;
    for idx in 0..u.len() {
        let lap = st.neighbour_sum(u, idx, &k) - st.diag * u[idx];
        r = r.max((lap - rho[idx]).abs());
        st.advance(&mut k);
    }
    r
}

/// Solves `Δu = rho` with homogeneous Neumann conditions on the grid of `rho`.
/// The trapezoid mean of `rho` is removed first and `u` is returned in the
/// zero-mean gauge.
pub fn solve_neumann_poisson(rho: &ScalarField, settings: &PoissonSettings) -> Result<ScalarField, PoissonError> {
    let grid = *rho.grid();
    if rho.values().iter().any(|v| !v.is_finite()) {
        return Err(PoissonError::NonFinite);
    }
    let mut rhs = rho.values().to_vec();
    subtract_mean(&grid, &mut rhs);
    let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(ScalarField::zeros(grid));
    }
    let target = settings.tol * scale;
    let st = Stencil::new(&grid);
    let n_max = grid.shape().iter().copied().max().unwrap_or(3);
    let h_min = grid.spacings().iter().copied().fold(f64::INFINITY, f64::min);
    let h_rel = h_min / grid.extent(0).max(grid.extent(grid.n_dim() - 1));
    let omega = settings.omega.unwrap_or(2.0 / (1.0 + (std::f64::consts::PI * h_rel).sin()));
    let max_iter = settings.max_iter.unwrap_or(40 * n_max + 400);

    let mut u = vec![0.0; rhs.len()];
    let mut history = Vec::new();
    let mut iter = 0;
    loop {
        for color in 0..2 {
            let mut k = [0usize; MAX_DIM];
            for idx in 0..u.len() {
                if (k.iter().sum::<usize>() & 1) == color {
                    let gs = (st.neighbour_sum(&u, idx, &k) - rhs[idx]) / st.diag;
                    u[idx] += omega * (gs - u[idx]);
                }
                st.advance(&mut k);
            }
        }
        iter += 1;
        if iter % CHECK_EVERY == 0 || iter >= max_iter {
            let r = residual_max(&st, &u, &rhs);
            history.push(r);
            if r <= target {
                break;
            }
            if iter >= max_iter {
                return Err(PoissonError::NoConvergence { iterations: iter, last: r, target, history });
            }
        }
    }
    subtract_mean(&grid, &mut u);
    Ok(ScalarField::new(grid, u).expect("shape preserved"))
}
