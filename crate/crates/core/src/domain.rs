//! Box domain geometry: the support-controlled subdomain, its collar band,
//! smooth cutoffs, and distances from the support of `f − g` to the boundary.

use thiserror::Error;

use crate::field::{FieldError, ScalarField};
use crate::grid::{BoxDomain, Grid, GridError, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("densities are sampled on different grids")]
    GridMismatch,
    #[error("support too close to boundary: node at distance {distance} from the boundary lies outside the subdomain inset by {margin}")]
    SupportTooClose { distance: f64, margin: f64 },
    #[error("support of f - g touches the boundary (distance {0})")]
    SupportOnBoundary(f64),
    #[error("invalid margin {margin}: must lie in (0, {limit})")]
    Margin { margin: f64, limit: f64 },
    #[error("invalid collar width {width}: must lie in (0, {limit})")]
    CollarWidth { width: f64, limit: f64 },
    #[error("inner box is not strictly inside the outer box")]
    Nesting,
}

/// Default relative threshold for deciding which nodes belong to `supp(f − g)`.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 1e-12;

/// Absolute support threshold for a density pair: the relative default scaled
/// by the larger sup-norm of the two densities.
pub fn support_threshold(f: &ScalarField, g: &ScalarField, relative: f64) -> f64 {
    relative * f.max_abs().max(g.max_abs())
}

/// Indices of nodes where `|f − g| > threshold`.
pub fn support_nodes(f: &ScalarField, g: &ScalarField, threshold: f64) -> Result<Vec<usize>, DomainError> {
    if !f.grid().same_lattice(g.grid()) {
        return Err(DomainError::GridMismatch);
    }
    Ok(f.values()
        .iter()
        .zip(g.values())
        .enumerate()
        .filter(|(_, (a, b))| (*a - *b).abs() > threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Distance from the node set `{|f − g| > threshold}` to the boundary of the
/// grid box. An empty set is at distance `inradius(Ω)` by convention.
pub fn support_distance(f: &ScalarField, g: &ScalarField, threshold: f64) -> Result<f64, DomainError> {
    let nodes = support_nodes(f, g, threshold)?;
    let grid = f.grid();
    let bounds = grid.bounds();
    if nodes.is_empty() {
        return Ok(bounds.inradius());
    }
    Ok(nodes.iter().map(|&i| bounds.distance_to_boundary(&grid.node_at(i))).fold(f64::INFINITY, f64::min))
}

/// Smallest box containing the given nodes, or `None` for an empty set.
pub fn bounding_box(grid: &Grid, nodes: &[usize]) -> Option<BoxDomain> {
    let first = grid.node_at(*nodes.first()?);
    let mut lo = first;
    let mut hi = first;
    for &i in &nodes[1..] {
        let p = grid.node_at(i);
        for a in 0..grid.n_dim() {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    // degenerate extents (a single node row) are widened by a rounding-scale sliver
    for a in 0..grid.n_dim() {
        if hi[a] <= lo[a] {
            let eps = 1e-12 * grid.spacing(a);
            lo[a] -= eps;
            hi[a] += eps;
        }
    }
    BoxDomain::new(&lo[..grid.n_dim()], &hi[..grid.n_dim()]).ok()
}

/// Resolved geometry of one solve: Ω, the inset subdomain Ω′ and the collar width inside Ω′.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    bounds: BoxDomain,
    margin: f64,
    collar_width: f64,
}

impl DomainSpec {
    pub fn new(bounds: BoxDomain, margin: f64, collar_width: f64) -> Result<Self, DomainError> {
        let r = bounds.inradius();
        if !(margin > 0.0 && margin < r) {
            return Err(DomainError::Margin { margin, limit: r });
        }
        if !(collar_width > 0.0 && margin + collar_width < r) {
            return Err(DomainError::CollarWidth { width: collar_width, limit: r - margin });
        }
        Ok(Self { bounds, margin, collar_width })
    }

    pub fn bounds(&self) -> &BoxDomain {
        &self.bounds
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn collar_width(&self) -> f64 {
        self.collar_width
    }

    pub fn omega_prime(&self) -> BoxDomain {
        self.bounds.inset(self.margin).expect("margin validated against inradius")
    }
}

/// Outcome of [`select_subdomain`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subdomain {
    pub omega_prime: BoxDomain,
    pub margin: f64,
    pub support_distance: f64,
    pub support_empty: bool,
}

/// Picks Ω′ as the grid box inset by `margin` (default: half the support
/// distance) and checks that every support node lies in its interior.
pub fn select_subdomain(
    f: &ScalarField,
    g: &ScalarField,
    threshold: f64,
    forced_margin: Option<f64>,
) -> Result<Subdomain, DomainError> {
    let nodes = support_nodes(f, g, threshold)?;
    let grid = f.grid();
    let bounds = grid.bounds();
    let d = if nodes.is_empty() {
        bounds.inradius()
    } else {
        nodes.iter().map(|&i| bounds.distance_to_boundary(&grid.node_at(i))).fold(f64::INFINITY, f64::min)
    };
    if d <= 0.0 {
        return Err(DomainError::SupportOnBoundary(d));
    }
    let margin = forced_margin.unwrap_or(d / 2.0);
    let r = bounds.inradius();
    if !(margin > 0.0 && margin < r) {
        return Err(DomainError::Margin { margin, limit: r });
    }
    let omega_prime = bounds.inset(margin)?;
    for &i in &nodes {
        let p = grid.node_at(i);
        if !omega_prime.contains_open(&p) {
            return Err(DomainError::SupportTooClose { distance: bounds.distance_to_boundary(&p), margin });
        }
    }
    Ok(Subdomain { omega_prime, margin, support_distance: d, support_empty: nodes.is_empty() })
}

/// Collar band `{x ∈ Ω̄′ : dist(x, ∂Ω′) ≤ ε}` of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollarBand {
    outer: BoxDomain,
    inner: BoxDomain,
    width: f64,
}

impl CollarBand {
    pub fn outer(&self) -> &BoxDomain {
        &self.outer
    }

    /// The open core left after removing the band.
    pub fn inner(&self) -> &BoxDomain {
        &self.inner
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.outer.contains(p) && !self.inner.contains_open(p)
    }
}

pub fn collar_band(omega_prime: &BoxDomain, eps: f64) -> Result<CollarBand, DomainError> {
    let limit = omega_prime.inradius();
    if !(eps > 0.0 && eps < limit) {
        return Err(DomainError::CollarWidth { width: eps, limit });
    }
    Ok(CollarBand { outer: *omega_prime, inner: omega_prime.inset(eps)?, width: eps })
}

/// Quintic smoothstep: C² on [0, 1] with vanishing first and second derivatives at both ends.
pub fn smootherstep(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        s * s * s * (s * (6.0 * s - 15.0) + 10.0)
    }
}

/// Sampled product-ramp cutoff: 1 on `inner`, 0 outside `outer`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffField {
    field: ScalarField,
    inner: BoxDomain,
    outer: BoxDomain,
}

impl CutoffField {
    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn inner(&self) -> &BoxDomain {
        &self.inner
    }

    pub fn outer(&self) -> &BoxDomain {
        &self.outer
    }

    pub fn value_at(&self, p: &Point) -> f64 {
        cutoff_value(&self.inner, &self.outer, p)
    }
}

fn cutoff_value(inner: &BoxDomain, outer: &BoxDomain, p: &Point) -> f64 {
    let mut chi = 1.0;
    for a in 0..inner.n_dim() {
        let x = p[a];
        let (ilo, ihi) = (inner.lower()[a], inner.upper()[a]);
        let (olo, ohi) = (outer.lower()[a], outer.upper()[a]);
        let r = if x >= ilo && x <= ihi {
            1.0
        } else if x <= olo || x >= ohi {
            0.0
        } else if x < ilo {
            smootherstep((x - olo) / (ilo - olo))
        } else {
            smootherstep((ohi - x) / (ohi - ihi))
        };
        chi *= r;
        if chi == 0.0 {
            break;
        }
    }
    chi
}

pub fn make_cutoff(inner: &BoxDomain, outer: &BoxDomain, grid: &Grid) -> Result<CutoffField, DomainError> {
    if !outer.strictly_contains(inner) {
        return Err(DomainError::Nesting);
    }
    let field = ScalarField::from_fn(*grid, |p| cutoff_value(inner, outer, p))?;
    Ok(CutoffField { field, inner: *inner, outer: *outer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::gradient;
    use crate::grid::point;
    use proptest::prelude::*;

    fn bump_pair(grid: Grid, center: [f64; 2], radius: f64) -> (ScalarField, ScalarField) {
        let f = ScalarField::from_fn(grid, |p| {
            let r2 = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)) / (radius * radius);
            1.0 + if r2 < 1.0 { (1.0 - r2).powi(4) } else { 0.0 }
        })
        .unwrap();
        let g = ScalarField::constant(grid, 1.0).unwrap();
        (f, g)
    }

    #[test]
    fn empty_support_uses_inradius() {
        let g = Grid::unit(2, 33).unwrap();
        let f = ScalarField::constant(g, 1.0).unwrap();
        assert_eq!(support_distance(&f, &f, 1e-12).unwrap(), 0.5);
        let sub = select_subdomain(&f, &f, 1e-12, None).unwrap();
        assert!(sub.support_empty);
        assert_eq!(sub.omega_prime, BoxDomain::new(&[0.25, 0.25], &[0.75, 0.75]).unwrap());
    }

    #[test]
    fn bump_support_distance() {
        let grid = Grid::unit(2, 65).unwrap();
        let h = grid.spacing(0);
        let f = ScalarField::from_fn(grid, |p| {
            if (0.4..=0.6).contains(&p[0]) && (0.4..=0.6).contains(&p[1]) {
                2.0
            } else {
                1.0
            }
        })
        .unwrap();
        let g = ScalarField::constant(grid, 1.0).unwrap();
        let d = support_distance(&f, &g, 1e-12).unwrap();
        assert!((d - 0.4).abs() <= h, "d = {d}");
        assert_eq!(support_distance(&f, &g, 10.0).unwrap(), 0.5);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = ScalarField::constant(Grid::unit(2, 9).unwrap(), 1.0).unwrap();
        let b = ScalarField::constant(Grid::unit(2, 17).unwrap(), 1.0).unwrap();
        assert_eq!(support_distance(&a, &b, 0.0), Err(DomainError::GridMismatch));
    }

    #[test]
    fn subdomain_inset_arithmetic() {
        let grid = Grid::unit(2, 65).unwrap();
        let f = ScalarField::from_fn(grid, |p| {
            if (0.4..=0.6).contains(&p[0]) && (0.4..=0.6).contains(&p[1]) {
                2.0
            } else {
                1.0
            }
        })
        .unwrap();
        let g = ScalarField::constant(grid, 1.0).unwrap();
        let sub = select_subdomain(&f, &g, 1e-12, None).unwrap();
        assert!((sub.support_distance - 0.40625).abs() < 1e-12);
        assert!((sub.omega_prime.lower()[0] - 0.203125).abs() < 1e-12);
        let sub = select_subdomain(&f, &g, 1e-12, Some(0.2)).unwrap();
        assert!((sub.omega_prime.lower()[0] - 0.2).abs() < 1e-15);
        assert!((sub.omega_prime.upper()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn forced_margin_past_support_fails() {
        let grid = Grid::unit(2, 65).unwrap();
        let (f, g) = bump_pair(grid, [0.2, 0.5], 0.1);
        let d = support_distance(&f, &g, 1e-12).unwrap();
        assert!(d < 0.11 && d > 0.09);
        assert!(matches!(select_subdomain(&f, &g, 1e-12, Some(0.2)), Err(DomainError::SupportTooClose { .. })));
    }

    #[test]
    fn collar_examples() {
        let op = BoxDomain::new(&[0.2, 0.2], &[0.8, 0.8]).unwrap();
        let band = collar_band(&op, 0.1).unwrap();
        for a in 0..2 {
            assert!((band.inner().lower()[a] - 0.3).abs() < 1e-15);
            assert!((band.inner().upper()[a] - 0.7).abs() < 1e-15);
        }
        assert!(band.contains(&point(&[0.25, 0.5])));
        assert!(!band.contains(&point(&[0.5, 0.5])));
        assert!(band.contains(&point(&[0.3, 0.5])));
        assert!(!band.contains(&point(&[0.9, 0.5])));
        let thin = collar_band(&op, 1e-9).unwrap();
        assert!(thin.contains(&point(&[0.2, 0.5])));
        assert!(!thin.contains(&point(&[0.2 + 1e-6, 0.5])));
        assert!(collar_band(&op, 0.3).is_err());
        assert!(collar_band(&op, 0.0).is_err());
    }

    #[test]
    fn cutoff_examples() {
        let grid = Grid::unit(2, 33).unwrap();
        let inner = BoxDomain::new(&[0.3, 0.3], &[0.7, 0.7]).unwrap();
        let outer = BoxDomain::new(&[0.2, 0.2], &[0.8, 0.8]).unwrap();
        let c = make_cutoff(&inner, &outer, &grid).unwrap();
        assert_eq!(c.value_at(&point(&[0.5, 0.4])), 1.0);
        assert_eq!(c.value_at(&point(&[0.1, 0.5])), 0.0);
        assert_eq!(c.value_at(&point(&[0.5, 0.85])), 0.0);
        assert!((c.value_at(&point(&[0.25, 0.5])) - 0.5).abs() < 1e-15);
        assert!(c.field().values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(make_cutoff(&outer, &inner, &grid).is_err());
    }

    #[test]
    fn cutoff_gradient_vanishes_off_ramp() {
        let grid = Grid::unit(2, 65).unwrap();
        let h = grid.spacing(0);
        let inner = BoxDomain::new(&[0.35, 0.3], &[0.6, 0.7]).unwrap();
        let outer = BoxDomain::new(&[0.2, 0.15], &[0.8, 0.85]).unwrap();
        let c = make_cutoff(&inner, &outer, &grid).unwrap();
        let gr = gradient(c.field());
        let deep_inner = inner.inset(h * 1.01).unwrap();
        for i in 0..grid.len() {
            let p = grid.node_at(i);
            if deep_inner.contains(&p) || outer.distance_to(&p) > h * 1.01 {
                assert_eq!(gr.component(0)[i], 0.0);
                assert_eq!(gr.component(1)[i], 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn subdomain_contains_support(cx in 0.3f64..0.7, cy in 0.3f64..0.7, r in 0.05f64..0.15) {
            let grid = Grid::unit(2, 33).unwrap();
            let (f, g) = bump_pair(grid, [cx, cy], r);
            let sub = select_subdomain(&f, &g, 1e-12, None).unwrap();
            for i in support_nodes(&f, &g, 1e-12).unwrap() {
                prop_assert!(sub.omega_prime.contains_open(&grid.node_at(i)));
            }
            let bounds = grid.bounds();
            for a in 0..2 {
                prop_assert!(sub.omega_prime.lower()[a] - bounds.lower()[a] >= sub.margin - 1e-15);
                prop_assert!(bounds.upper()[a] - sub.omega_prime.upper()[a] >= sub.margin - 1e-15);
            }
        }

        #[test]
        fn support_distance_monotone_in_threshold(cx in 0.3f64..0.7, r in 0.05f64..0.2, t in 1e-6f64..0.5) {
            let grid = Grid::unit(2, 33).unwrap();
            let (f, g) = bump_pair(grid, [cx, 0.5], r);
            let coarse = support_distance(&f, &g, t).unwrap();
            let fine = support_distance(&f, &g, t / 10.0).unwrap();
            prop_assert!(fine <= coarse);
        }
    }
}
