//! Node-sampled scalar and vector fields with multilinear interpolation,
//! second-order finite-difference operators and trapezoidal quadrature.

use thiserror::Error;

use crate::grid::{CellLocation, Grid, GridError, IndexBox, Point, MAX_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{what}: expected {expected} samples, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("{what}: non-finite sample at node {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("density must be strictly positive; node {index} holds {value}")]
    NonPositive { index: usize, value: f64 },
    #[error("query point has a non-finite coordinate: {0:?}")]
    NonFinitePoint(Vec<f64>),
    #[error("fields live on different grids")]
    GridMismatch,
}

fn check_finite(what: &'static str, values: &[f64]) -> Result<(), FieldError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(FieldError::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn check_point(grid: &Grid, p: &Point) -> Result<(), FieldError> {
    if p[..grid.n_dim()].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FieldError::NonFinitePoint(p[..grid.n_dim()].to_vec()))
    }
}

/// One finite sample per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::Length { what: "scalar field", expected: grid.len(), got: values.len() });
        }
        check_finite("scalar field", &values)?;
        Ok(Self { grid, values })
    }

    /// A field tagged as a density: finite and strictly positive everywhere.
    pub fn density(grid: Grid, values: Vec<f64>) -> Result<Self, FieldError> {
        let field = Self::new(grid, values)?;
        field.check_positive()?;
        Ok(field)
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&Point) -> f64) -> Result<Self, FieldError> {
        let values = (0..grid.len()).map(|i| f(&grid.node_at(i))).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Grid, c: f64) -> Result<Self, FieldError> {
        Self::new(grid, vec![c; grid.len()])
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn check_positive(&self) -> Result<(), FieldError> {
        match self.values.iter().position(|v| *v <= 0.0) {
            Some(index) => Err(FieldError::NonPositive { index, value: self.values[index] }),
            None => Ok(()),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Applies `f` node-wise; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, FieldError> {
        Self::new(self.grid, self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self, FieldError> {
        if !self.grid.same_lattice(&other.grid) {
            return Err(FieldError::GridMismatch);
        }
        Self::new(self.grid, self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect())
    }

    pub fn scale(&self, s: f64) -> Result<Self, FieldError> {
        self.map(|v| v * s)
    }

    /// Value at a located cell. No bounds or finiteness checks.
    #[inline]
    pub fn sample(&self, loc: &CellLocation) -> f64 {
        let mut idx = [0; 8];
        let mut w = [0.0; 8];
        let n = self.grid.corner_weights(loc, &mut idx, &mut w);
        let mut acc = 0.0;
        for c in 0..n {
            acc += w[c] * self.values[idx[c]];
        }
        acc
    }

    /// Multilinear interpolation; points outside the box are clamped onto it.
    pub fn interpolate(&self, p: &Point) -> Result<f64, FieldError> {
        check_point(&self.grid, p)?;
        Ok(self.sample(&self.grid.locate(p)))
    }

    /// Copies the samples of the sub-lattice `ib` onto `sub`.
    pub fn restrict(&self, sub: Grid, ib: &IndexBox) -> Result<Self, FieldError> {
        let values = (0..sub.len())
            .map(|i| {
                let k = sub.multi_index(i);
                let mut kk = [0; MAX_DIM];
                for a in 0..self.grid.n_dim() {
                    kk[a] = k[a] + ib.lo[a];
                }
                self.values[self.grid.linear_index(&kk)]
            })
            .collect();
        Self::new(sub, values)
    }
}

/// One sample array per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: Grid, components: Vec<Vec<f64>>) -> Result<Self, FieldError> {
        if components.len() != grid.n_dim() {
            return Err(FieldError::Length {
                what: "vector components",
                expected: grid.n_dim(),
                got: components.len(),
            });
        }
        for c in &components {
            if c.len() != grid.len() {
                return Err(FieldError::Length { what: "vector field", expected: grid.len(), got: c.len() });
            }
            check_finite("vector field", c)?;
        }
        Ok(Self { grid, components })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, components: vec![vec![0.0; grid.len()]; grid.n_dim()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&Point) -> Point) -> Result<Self, FieldError> {
        let mut comps = vec![vec![0.0; grid.len()]; grid.n_dim()];
        for i in 0..grid.len() {
            let v = f(&grid.node_at(i));
            for (a, comp) in comps.iter_mut().enumerate() {
                comp[i] = v[a];
            }
        }
        Self::new(grid, comps)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn into_components(self) -> Vec<Vec<f64>> {
        self.components
    }

    pub fn at(&self, idx: usize) -> Point {
        let mut v = [0.0; MAX_DIM];
        for (a, c) in self.components.iter().enumerate() {
            v[a] = c[idx];
        }
        v
    }

    /// Largest Euclidean length over all nodes.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| self.components.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_zero_at(&self, idx: usize) -> bool {
        self.components.iter().all(|c| c[idx] == 0.0)
    }

    #[inline]
    pub fn sample(&self, loc: &CellLocation) -> Point {
        let mut idx = [0; 8];
        let mut w = [0.0; 8];
        let n = self.grid.corner_weights(loc, &mut idx, &mut w);
        let mut out = [0.0; MAX_DIM];
        for (a, comp) in self.components.iter().enumerate() {
            let mut acc = 0.0;
            for c in 0..n {
                acc += w[c] * comp[idx[c]];
            }
            out[a] = acc;
        }
        out
    }

    /// Componentwise multilinear interpolation with clamping.
    pub fn interpolate(&self, p: &Point) -> Result<Point, FieldError> {
        check_point(&self.grid, p)?;
        Ok(self.sample(&self.grid.locate(p)))
    }

    /// Value and derivative matrix (`d[a][b] = ∂v_a/∂x_b`) of the multilinear interpolant
    /// within the cell at `loc`.
    pub fn sample_with_derivative(&self, loc: &CellLocation) -> (Point, [[f64; MAX_DIM]; MAX_DIM]) {
        let g = &self.grid;
        let n_dim = g.n_dim();
        let mut value = [0.0; MAX_DIM];
        let mut deriv = [[0.0; MAX_DIM]; MAX_DIM];
        for c in 0..(1usize << n_dim) {
            let mut lin = 0;
            for i in (0..n_dim).rev() {
                lin = lin * g.shape()[i] + loc.base[i] + ((c >> i) & 1);
            }
            let factors: Vec<(f64, f64)> = (0..n_dim)
                .map(|i| {
                    let bit = (c >> i) & 1;
                    let w = if bit == 1 { loc.frac[i] } else { 1.0 - loc.frac[i] };
                    let dw = if bit == 1 { 1.0 } else { -1.0 } / g.spacing(i);
                    (w, dw)
                })
                .collect();
            let weight: f64 = factors.iter().map(|f| f.0).product();
            for (a, comp) in self.components.iter().enumerate() {
                let v = comp[lin];
                value[a] += weight * v;
                for b in 0..n_dim {
                    let dwb: f64 = factors.iter().enumerate().map(|(i, f)| if i == b { f.1 } else { f.0 }).product();
                    deriv[a][b] += dwb * v;
                }
            }
        }
        (value, deriv)
    }
}

/// First- and second-derivative stencils at node `e` of a line of `n` nodes,
/// scaled by `h` and `h²`, as weights on nodes `e−2..=e+2` (index 2 is `e`).
/// Fourth order in the interior, second order within two nodes of an end;
/// the end nodes use one-sided stencils shifted by `offset`.
fn derivative_stencils(n: usize, e: usize) -> (isize, [f64; 5], [f64; 5]) {
    if e >= 2 && e + 2 < n {
        (
            -2,
            [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0],
            [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0],
        )
    } else if e >= 1 && e + 1 < n {
        (-1, [-0.5, 0.0, 0.5, 0.0, 0.0], [1.0, -2.0, 1.0, 0.0, 0.0])
    } else if e == 0 {
        (0, [-1.5, 2.0, -0.5, 0.0, 0.0], [2.0, -5.0, 4.0, -1.0, 0.0])
    } else {
        (-3, [0.0, 0.5, -2.0, 1.5, 0.0], [-1.0, 4.0, -5.0, 2.0, 0.0])
    }
}

/// Weights of the quintic Hermite interpolant on the cell `[k, k+1]` at
/// fraction `t`, over the window of nodes starting at the returned index.
/// Values and estimated first and second derivatives match at both ends, so
/// the interpolant is C² across cell faces and exact at nodes.
fn local_quintic_weights(n: usize, k: usize, t: f64) -> (usize, [f64; 6], usize) {
    let (t2, t3) = (t * t, t * t * t);
    let (t4, t5) = (t3 * t, t3 * t2);
    let basis = [
        [
            1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
            t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
            0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
        ],
        [10.0 * t3 - 15.0 * t4 + 6.0 * t5, -4.0 * t3 + 7.0 * t4 - 3.0 * t5, 0.5 * t3 - t4 + 0.5 * t5],
    ];
    let start = k.saturating_sub(2);
    let end = (k + 3).min(n - 1);
    let mut w = [0.0; 6];
    for (side, b) in basis.iter().enumerate() {
        let e = k + side;
        w[e - start] += b[0];
        if b[1] == 0.0 && b[2] == 0.0 {
            continue;
        }
        let (offset, d1, d2) = derivative_stencils(n, e);
        for j in 0..5 {
            if d1[j] == 0.0 && d2[j] == 0.0 {
                continue;
            }
            let node = (e as isize + offset + j as isize) as usize;
            w[node - start] += b[1] * d1[j] + b[2] * d2[j];
        }
    }
    (start, w, end - start + 1)
}

/// Four-point Lagrange weights on the nodes nearest to `k + t`, shifted
/// inwards at the ends; reaches two cells on either side.
fn cubic_lagrange_weights(n: usize, k: usize, t: f64) -> (usize, [f64; 6], usize) {
    let mut w = [0.0; 6];
    if n < 4 {
        w[0] = 1.0 - t;
        w[1] = t;
        return (k.min(n.saturating_sub(2)), w, 2.min(n));
    }
    let start = k.saturating_sub(1).min(n - 4);
    let x = (k - start) as f64 + t;
    for (j, wj) in w.iter_mut().enumerate().take(4) {
        let mut v = 1.0;
        for m in 0..4 {
            if m != j {
                v *= (x - m as f64) / (j as f64 - m as f64);
            }
        }
        *wj = v;
    }
    (start, w, 4)
}

/// Calls `visit(node, weight)` for every node of the smooth-interpolation stencil at `loc`.
#[inline]
fn smooth_stencil(g: &Grid, loc: &CellLocation, visit: impl FnMut(usize, f64)) {
    tensor_stencil(g, loc, local_quintic_weights, visit)
}

/// `(n, k, t)` to `(start, weights, reach)` along one axis.
type StencilWeights = fn(usize, usize, f64) -> (usize, [f64; 6], usize);

#[inline]
fn tensor_stencil(g: &Grid, loc: &CellLocation, weights: StencilWeights, mut visit: impl FnMut(usize, f64)) {
    let n_dim = g.n_dim();
    let mut stencils = [(0usize, [0.0f64; 6], 1usize); MAX_DIM];
    for (a, st) in stencils.iter_mut().enumerate().take(n_dim) {
        *st = weights(g.shape()[a], loc.base[a], loc.frac[a]);
    }
    let mut k = [0usize; MAX_DIM];
    let total: usize = stencils[..n_dim].iter().map(|s| s.2).product();
    for mut c in 0..total {
        let mut w = 1.0;
        for a in 0..n_dim {
            let j = c % stencils[a].2;
            c /= stencils[a].2;
            k[a] = stencils[a].0 + j;
            w *= stencils[a].1[j];
        }
        if w != 0.0 {
            visit(g.linear_index(&k), w);
        }
    }
}

impl ScalarField {
    /// C² piecewise-quintic interpolation at a located cell; exact at nodes.
    pub fn sample_smooth(&self, loc: &CellLocation) -> f64 {
        let mut acc = 0.0;
        smooth_stencil(&self.grid, loc, |idx, w| acc += w * self.values[idx]);
        acc
    }

    /// Fourth-order tensor cubic Lagrange interpolation; exact at nodes and
    /// reaching only two cells, at the price of continuity of the derivative.
    pub fn sample_cubic(&self, loc: &CellLocation) -> f64 {
        let mut acc = 0.0;
        tensor_stencil(&self.grid, loc, cubic_lagrange_weights, |idx, w| acc += w * self.values[idx]);
        acc
    }
}

impl VectorField {
    /// C² piecewise-quintic interpolation at a located cell; exact at nodes
    /// and zero wherever every node of the stencil is zero.
    pub fn sample_smooth(&self, loc: &CellLocation) -> Point {
        let mut out = [0.0; MAX_DIM];
        smooth_stencil(&self.grid, loc, |idx, w| {
            for (o, comp) in out.iter_mut().zip(&self.components) {
                *o += w * comp[idx];
            }
        });
        out
    }
}

/// Second-order derivative of node samples along `axis`: central in the
/// interior, one-sided three-point at the two faces.
pub(crate) fn derivative_along(grid: &Grid, values: &[f64], axis: usize) -> Vec<f64> {
    let n = grid.shape()[axis];
    let stride = grid.stride(axis);
    let inv2h = 0.5 / grid.spacing(axis);
    let mut out = vec![0.0; values.len()];
    for (idx, slot) in out.iter_mut().enumerate() {
        let k = (idx / stride) % n;
        *slot = if k == 0 {
            (-3.0 * values[idx] + 4.0 * values[idx + stride] - values[idx + 2 * stride]) * inv2h
        } else if k == n - 1 {
            (3.0 * values[idx] - 4.0 * values[idx - stride] + values[idx - 2 * stride]) * inv2h
        } else {
            (values[idx + stride] - values[idx - stride]) * inv2h
        };
    }
    out
}

pub fn gradient(field: &ScalarField) -> VectorField {
    let g = field.grid;
    let comps = (0..g.n_dim()).map(|a| derivative_along(&g, &field.values, a)).collect();
    VectorField { grid: g, components: comps }
}

pub fn divergence(field: &VectorField) -> ScalarField {
    let g = field.grid;
    let mut acc = vec![0.0; g.len()];
    for (a, comp) in field.components.iter().enumerate() {
        for (s, d) in acc.iter_mut().zip(derivative_along(&g, comp, a)) {
            *s += d;
        }
    }
    ScalarField { grid: g, values: acc }
}

/// Trapezoidal rule over the grid box.
pub fn integrate(field: &ScalarField) -> f64 {
    let g = &field.grid;
    field.values.iter().enumerate().map(|(i, v)| g.trapezoid_weight(&g.multi_index(i)) * v).sum()
}

/// Determinant of the finite-difference Jacobian of `x ↦ x + u(x)`.
pub fn displacement_jacobian(u: &VectorField) -> ScalarField {
    let g = u.grid;
    let n = g.n_dim();
    // grads[a][b] = ∂u_a/∂x_b
    let grads: Vec<Vec<Vec<f64>>> =
        u.components.iter().map(|c| (0..n).map(|b| derivative_along(&g, c, b)).collect()).collect();
    let values = (0..g.len())
        .map(|i| {
            let mut m = [[0.0; MAX_DIM]; MAX_DIM];
            for a in 0..n {
                for b in 0..n {
                    m[a][b] = grads[a][b][i] + if a == b { 1.0 } else { 0.0 };
                }
            }
            determinant(&m, n)
        })
        .collect();
    ScalarField { grid: g, values }
}

pub(crate) fn determinant(m: &[[f64; MAX_DIM]; MAX_DIM], n: usize) -> f64 {
    if n == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}
