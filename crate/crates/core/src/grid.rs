//! Uniform lattices over axis-aligned boxes.
//!
//! Storage order is axis 0 fastest: the linear index of `(k0, k1, k2)` is
//! `k0 + n0 * (k1 + n1 * k2)`. Only the first `n_dim` entries of a [`Point`]
//! are meaningful; trailing entries are kept at zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DIM: usize = 3;

/// Coordinates in up to three dimensions.
pub type Point = [f64; MAX_DIM];

/// Fractional offsets closer than this to a node are snapped onto it, so that
/// lookups at node coordinates reproduce node values bit-exactly.
const NODE_SNAP: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension {0} unsupported (expected 2 or 3)")]
    Dimension(usize),
    #[error("axis {axis}: {reason}")]
    Axis { axis: usize, reason: String },
    #[error("box is empty or inverted on axis {0}")]
    EmptyBox(usize),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("no grid nodes inside the requested box")]
    EmptySublattice,
}

/// Closed axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    n_dim: usize,
    lower: Point,
    upper: Point,
}

impl BoxDomain {
    pub fn new(lower: &[f64], upper: &[f64]) -> Result<Self, GridError> {
        let n_dim = lower.len();
        if !(2..=MAX_DIM).contains(&n_dim) || upper.len() != n_dim {
            return Err(GridError::Dimension(n_dim.max(upper.len())));
        }
        let mut lo = [0.0; MAX_DIM];
        let mut hi = [0.0; MAX_DIM];
        for i in 0..n_dim {
            if !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(GridError::NonFinite);
            }
            if upper[i] <= lower[i] {
                return Err(GridError::EmptyBox(i));
            }
            lo[i] = lower[i];
            hi[i] = upper[i];
        }
        Ok(Self { n_dim, lower: lo, upper: hi })
    }

    pub fn unit(n_dim: usize) -> Self {
        let ones = vec![1.0; n_dim];
        let zeros = vec![0.0; n_dim];
        Self::new(&zeros, &ones).expect("unit box is valid")
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower[..self.n_dim]
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper[..self.n_dim]
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn measure(&self) -> f64 {
        (0..self.n_dim).map(|i| self.side(i)).product()
    }

    /// Radius of the largest inscribed ball: half the shortest side.
    pub fn inradius(&self) -> f64 {
        (0..self.n_dim).map(|i| self.side(i)).fold(f64::INFINITY, f64::min) / 2.0
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..self.n_dim).all(|i| p[i] >= self.lower[i] && p[i] <= self.upper[i])
    }

    pub fn contains_open(&self, p: &Point) -> bool {
        (0..self.n_dim).all(|i| p[i] > self.lower[i] && p[i] < self.upper[i])
    }

    /// True when `other` lies in the closure of `self`.
    pub fn contains_box(&self, other: &BoxDomain) -> bool {
        (0..self.n_dim).all(|i| other.lower[i] >= self.lower[i] && other.upper[i] <= self.upper[i])
    }

    /// True when the closure of `other` lies in the interior of `self`.
    pub fn strictly_contains(&self, other: &BoxDomain) -> bool {
        (0..self.n_dim).all(|i| other.lower[i] > self.lower[i] && other.upper[i] < self.upper[i])
    }

    /// Shrinks every face inward by `margin`.
    pub fn inset(&self, margin: f64) -> Result<Self, GridError> {
        let lo: Vec<f64> = self.lower().iter().map(|v| v + margin).collect();
        let hi: Vec<f64> = self.upper().iter().map(|v| v - margin).collect();
        Self::new(&lo, &hi)
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BoxDomain) -> Self {
        let mut out = *self;
        for i in 0..self.n_dim {
            out.lower[i] = self.lower[i].min(other.lower[i]);
            out.upper[i] = self.upper[i].max(other.upper[i]);
        }
        out
    }

    /// Euclidean distance from `p` to the boundary; `p` is assumed to lie in the box.
    pub fn distance_to_boundary(&self, p: &Point) -> f64 {
        (0..self.n_dim).map(|i| (p[i] - self.lower[i]).min(self.upper[i] - p[i])).fold(f64::INFINITY, f64::min)
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance_to(&self, p: &Point) -> f64 {
        (0..self.n_dim)
            .map(|i| {
                let d = (self.lower[i] - p[i]).max(p[i] - self.upper[i]).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn clamp(&self, p: &Point) -> Point {
        let mut q = *p;
        for i in 0..self.n_dim {
            q[i] = q[i].clamp(self.lower[i], self.upper[i]);
        }
        q
    }
}

/// Inclusive index range of a sub-lattice along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexBox {
    pub lo: [usize; MAX_DIM],
    pub hi: [usize; MAX_DIM],
}

impl IndexBox {
    pub fn contains(&self, k: &[usize; MAX_DIM], n_dim: usize) -> bool {
        (0..n_dim).all(|i| k[i] >= self.lo[i] && k[i] <= self.hi[i])
    }

    pub fn count(&self, axis: usize) -> usize {
        self.hi[axis] - self.lo[axis] + 1
    }
}

/// Position of a point inside the lattice: lower cell corner and fractional offsets.
#[derive(Debug, Clone, Copy)]
pub struct CellLocation {
    pub base: [usize; MAX_DIM],
    pub frac: [f64; MAX_DIM],
}

/// Uniform node lattice over a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n_dim: usize,
    shape: [usize; MAX_DIM],
    origin: Point,
    spacing: Point,
}

impl Grid {
    /// Lattice with `shape[i]` nodes spanning `extent[i]` from `origin[i]`.
    pub fn new(shape: &[usize], origin: &[f64], extent: &[f64]) -> Result<Self, GridError> {
        let n_dim = shape.len();
        if !(2..=MAX_DIM).contains(&n_dim) || origin.len() != n_dim || extent.len() != n_dim {
            return Err(GridError::Dimension(n_dim));
        }
        let mut spacing = vec![0.0; n_dim];
        for i in 0..n_dim {
            if !(extent[i].is_finite() && extent[i] > 0.0) {
                return Err(GridError::Axis { axis: i, reason: format!("extent {} must be positive", extent[i]) });
            }
            spacing[i] = extent[i] / (shape[i].max(2) - 1) as f64;
        }
        Self::from_spacing(shape, origin, &spacing)
    }

    /// Square (or cubic) lattice with `n` nodes per axis over the unit box.
    pub fn unit(n_dim: usize, n: usize) -> Result<Self, GridError> {
        Self::new(&vec![n; n_dim], &vec![0.0; n_dim], &vec![1.0; n_dim])
    }

    /// Lattice with explicit spacing; used for sub-lattices so that spacing is inherited bit-exactly.
    pub fn from_spacing(shape: &[usize], origin: &[f64], spacing: &[f64]) -> Result<Self, GridError> {
        let n_dim = shape.len();
        if !(2..=MAX_DIM).contains(&n_dim) || origin.len() != n_dim || spacing.len() != n_dim {
            return Err(GridError::Dimension(n_dim));
        }
        let mut g = Self { n_dim, shape: [1; MAX_DIM], origin: [0.0; MAX_DIM], spacing: [0.0; MAX_DIM] };
        for i in 0..n_dim {
            if shape[i] < 3 {
                return Err(GridError::Axis { axis: i, reason: format!("needs at least 3 nodes, got {}", shape[i]) });
            }
            if !origin[i].is_finite() {
                return Err(GridError::NonFinite);
            }
            if !(spacing[i].is_finite() && spacing[i] > 0.0) {
                return Err(GridError::Axis { axis: i, reason: format!("spacing {} must be positive", spacing[i]) });
            }
            g.shape[i] = shape[i];
            g.origin[i] = origin[i];
            g.spacing[i] = spacing[i];
        }
        Ok(g)
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape[..self.n_dim]
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.n_dim]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    pub fn spacings(&self) -> &[f64] {
        &self.spacing[..self.n_dim]
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.spacing[axis] * (self.shape[axis] - 1) as f64
    }

    /// Largest spacing over all axes.
    pub fn max_spacing(&self) -> f64 {
        self.spacings().iter().copied().fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> BoxDomain {
        let lo: Vec<f64> = self.origin().to_vec();
        let hi: Vec<f64> = (0..self.n_dim).map(|i| self.coordinate(i, self.shape[i] - 1)).collect();
        BoxDomain::new(&lo, &hi).expect("grid bounds are a valid box")
    }

    pub fn measure(&self) -> f64 {
        (0..self.n_dim).map(|i| self.extent(i)).product()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.shape[..axis].iter().product()
    }

    pub fn coordinate(&self, axis: usize, k: usize) -> f64 {
        self.origin[axis] + k as f64 * self.spacing[axis]
    }

    pub fn linear_index(&self, k: &[usize; MAX_DIM]) -> usize {
        let mut idx = 0;
        for i in (0..self.n_dim).rev() {
            idx = idx * self.shape[i] + k[i];
        }
        idx
    }

    pub fn multi_index(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut k = [0; MAX_DIM];
        for i in 0..self.n_dim {
            k[i] = idx % self.shape[i];
            idx /= self.shape[i];
        }
        k
    }

    pub fn node(&self, k: &[usize; MAX_DIM]) -> Point {
        let mut p = [0.0; MAX_DIM];
        for i in 0..self.n_dim {
            p[i] = self.coordinate(i, k[i]);
        }
        p
    }

    pub fn node_at(&self, idx: usize) -> Point {
        self.node(&self.multi_index(idx))
    }

    /// Multi-index of the node at `p`, if `p` is a node coordinate up to rounding.
    pub fn index_of(&self, p: &Point) -> Option<[usize; MAX_DIM]> {
        let mut k = [0; MAX_DIM];
        for i in 0..self.n_dim {
            let s = (p[i] - self.origin[i]) / self.spacing[i];
            let r = s.round();
            if (s - r).abs() > 1e-9 || r < 0.0 || r as usize >= self.shape[i] {
                return None;
            }
            k[i] = r as usize;
        }
        Some(k)
    }

    /// Cell containing `p` after clamping `p` to the grid box.
    pub fn locate(&self, p: &Point) -> CellLocation {
        let mut base = [0; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for i in 0..self.n_dim {
            let n = self.shape[i];
            let s = ((p[i] - self.origin[i]) / self.spacing[i]).clamp(0.0, (n - 1) as f64);
            let mut k = s.floor() as usize;
            if k >= n - 1 {
                k = n - 2;
            }
            let mut t = s - k as f64;
            if t < NODE_SNAP {
                t = 0.0;
            } else if t > 1.0 - NODE_SNAP {
                t = 1.0;
            }
            base[i] = k;
            frac[i] = t;
        }
        CellLocation { base, frac }
    }

    /// Corner indices and multilinear weights of the cell at `loc`; returns the corner count.
    pub fn corner_weights(&self, loc: &CellLocation, idx: &mut [usize; 8], w: &mut [f64; 8]) -> usize {
        let corners = 1usize << self.n_dim;
        for c in 0..corners {
            let mut lin = 0;
            let mut weight = 1.0;
            for i in (0..self.n_dim).rev() {
                let bit = (c >> i) & 1;
                lin = lin * self.shape[i] + loc.base[i] + bit;
                weight *= if bit == 1 { loc.frac[i] } else { 1.0 - loc.frac[i] };
            }
            idx[c] = lin;
            w[c] = weight;
        }
        corners
    }

    /// Nodes inside `region` (closed, with rounding tolerance) as a sub-lattice sharing this spacing.
    pub fn sublattice(&self, region: &BoxDomain) -> Result<(Grid, IndexBox), GridError> {
        let mut ib = IndexBox { lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
        for i in 0..self.n_dim {
            let tol = 1e-9;
            let lo = ((region.lower()[i] - self.origin[i]) / self.spacing[i] - tol).ceil().max(0.0);
            let hi =
                ((region.upper()[i] - self.origin[i]) / self.spacing[i] + tol).floor().min((self.shape[i] - 1) as f64);
            if hi < lo + 2.0 {
                return Err(GridError::EmptySublattice);
            }
            ib.lo[i] = lo as usize;
            ib.hi[i] = hi as usize;
        }
        let shape: Vec<usize> = (0..self.n_dim).map(|i| ib.count(i)).collect();
        let origin: Vec<f64> = (0..self.n_dim).map(|i| self.coordinate(i, ib.lo[i])).collect();
        let sub = Grid::from_spacing(&shape, &origin, self.spacings())?;
        Ok((sub, ib))
    }

    /// Index box of the sub-lattice nodes lying in `region`, without building a grid.
    pub fn index_box(&self, region: &BoxDomain) -> Option<IndexBox> {
        let mut ib = IndexBox { lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
        for i in 0..self.n_dim {
            let tol = 1e-9;
            let lo = ((region.lower()[i] - self.origin[i]) / self.spacing[i] - tol).ceil().max(0.0);
            let hi =
                ((region.upper()[i] - self.origin[i]) / self.spacing[i] + tol).floor().min((self.shape[i] - 1) as f64);
            if hi < lo {
                return None;
            }
            ib.lo[i] = lo as usize;
            ib.hi[i] = hi as usize;
        }
        Some(ib)
    }

    /// Box spanned by the nodes of an index box.
    pub fn box_of(&self, ib: &IndexBox) -> Result<BoxDomain, GridError> {
        let lo: Vec<f64> = (0..self.n_dim).map(|i| self.coordinate(i, ib.lo[i])).collect();
        let hi: Vec<f64> = (0..self.n_dim).map(|i| self.coordinate(i, ib.hi[i])).collect();
        BoxDomain::new(&lo, &hi)
    }

    /// Trapezoidal quadrature weight of node `k`.
    pub fn trapezoid_weight(&self, k: &[usize; MAX_DIM]) -> f64 {
        let mut w = 1.0;
        for i in 0..self.n_dim {
            let edge = k[i] == 0 || k[i] == self.shape[i] - 1;
            w *= if edge { 0.5 * self.spacing[i] } else { self.spacing[i] };
        }
        w
    }

    /// Distance (in index units) from node `k` to the nearest grid face.
    pub fn index_depth(&self, k: &[usize; MAX_DIM]) -> usize {
        (0..self.n_dim).map(|i| k[i].min(self.shape[i] - 1 - k[i])).min().unwrap_or(0)
    }

    pub fn same_lattice(&self, other: &Grid) -> bool {
        self.n_dim == other.n_dim
            && self.shape() == other.shape()
            && (0..self.n_dim).all(|i| {
                (self.origin[i] - other.origin[i]).abs() <= 1e-12 * self.spacing[i]
                    && (self.spacing[i] - other.spacing[i]).abs() <= 1e-12 * self.spacing[i]
            })
    }
}

/// Builds a [`Point`] from a slice of up to three coordinates.
pub fn point(coords: &[f64]) -> Point {
    let mut p = [0.0; MAX_DIM];
    p[..coords.len()].copy_from_slice(coords);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_index_round_trip() {
        let g = Grid::new(&[9, 13], &[-1.0, 0.5], &[2.0, 3.0]).unwrap();
        for idx in 0..g.len() {
            let k = g.multi_index(idx);
            assert_eq!(g.linear_index(&k), idx);
            let p = g.node(&k);
            assert_eq!(g.index_of(&p), Some(k));
        }
    }

    #[test]
    fn spacing_matches_extent() {
        let g = Grid::new(&[9, 17], &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(g.spacing(0), 0.125);
        assert_eq!(g.spacing(1), 0.125);
        assert_eq!(g.measure(), 2.0);
    }

    #[test]
    fn rejects_degenerate_axes() {
        assert!(Grid::new(&[2, 9], &[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(Grid::new(&[9, 9], &[0.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(Grid::new(&[9], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn sublattice_shares_nodes() {
        let g = Grid::unit(2, 65).unwrap();
        let region = BoxDomain::new(&[0.2, 0.2], &[0.8, 0.8]).unwrap();
        let (sub, ib) = g.sublattice(&region).unwrap();
        assert_eq!(ib.lo[0], 13);
        assert_eq!(ib.hi[0], 51);
        assert_eq!(sub.shape(), &[39, 39]);
        let p = sub.node(&[0, 0, 0]);
        assert_eq!(g.index_of(&p), Some([13, 13, 0]));
    }

    #[test]
    fn locate_snaps_to_nodes() {
        let g = Grid::unit(2, 65).unwrap();
        let p = g.node(&[64, 7, 0]);
        let loc = g.locate(&p);
        assert_eq!(loc.base[0], 63);
        assert_eq!(loc.frac[0], 1.0);
        assert_eq!(loc.frac[1], 0.0);
    }

    #[test]
    fn box_distances() {
        let b = BoxDomain::unit(2);
        assert_eq!(b.inradius(), 0.5);
        assert!((b.distance_to_boundary(&point(&[0.3, 0.6])) - 0.3).abs() < 1e-15);
        assert_eq!(b.distance_to(&point(&[0.5, 0.5])), 0.0);
        assert!((b.distance_to(&point(&[1.3, 1.4])) - 0.5).abs() < 1e-12);
    }
}
