//! Grid diffeomorphisms `φ = id + u` and their algebra: composition,
//! pointwise inversion, pullback of densities and extension by identity.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::field::{determinant, displacement_jacobian, FieldError, ScalarField, VectorField};
use crate::flow::FlowProblem;
use crate::grid::{BoxDomain, Grid, GridError, Point, MAX_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffeoError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("maps live on different grids")]
    GridMismatch,
    #[error("node {node} is mapped {excess:e} outside the grid box")]
    OutsideBox { node: usize, excess: f64 },
    #[error("inversion failed at node {node}: last iterate {iterate:?}, residual {residual:e}")]
    InversionFailed { node: usize, iterate: Vec<f64>, residual: f64 },
    #[error("displacement is nonzero at node {node} outside the advertised support box")]
    SupportViolation { node: usize },
    #[error("Jacobian determinant {value} at node {node} is not positive")]
    NotOrientationPreserving { node: usize, value: f64 },
    #[error("target grid does not share the lattice of the source grid")]
    LatticeMismatch,
    #[error("flow evaluation failed: {0}")]
    Flow(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionSettings {
    /// Step size at which the per-point iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50 }
    }
}

/// Images may leave the grid box by this much (relative to the largest extent) and are clamped.
pub const CLAMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
enum Evaluation {
    Interpolated,
    InverseOf(Arc<Diffeomorphism>, InversionSettings),
    /// Time-one map of a flow (or its inverse), evaluated by integrating the trajectory.
    Flow(Arc<FlowProblem>, bool),
    /// `outer ∘ inner`, evaluated pointwise.
    Composite(Arc<Diffeomorphism>, Arc<Diffeomorphism>),
}

/// A map `x ↦ x + u(x)` of a grid box onto itself, sampled at the nodes and
/// evaluated between them by C² piecewise-quintic interpolation.
///
/// Maps produced by [`invert`] keep a handle to the map they invert and are
/// evaluated off the nodes by solving `φ(x) = y`, not by interpolation.
/// Flow maps integrate trajectories and composites evaluate their factors,
/// so neither loses accuracy to interpolation of node samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffeomorphism {
    displacement: VectorField,
    support_box: Option<BoxDomain>,
    evaluation: Evaluation,
}

impl Diffeomorphism {
    pub fn identity(grid: Grid) -> Self {
        Self { displacement: VectorField::zeros(grid), support_box: None, evaluation: Evaluation::Interpolated }
    }

    /// Wraps a node displacement; with a support box, checks that `u` vanishes outside it.
    pub fn from_displacement(displacement: VectorField, support_box: Option<BoxDomain>) -> Result<Self, DiffeoError> {
        let phi = Self { displacement, support_box, evaluation: Evaluation::Interpolated };
        phi.check_support()?;
        Ok(phi)
    }

    pub(crate) fn from_flow(problem: Arc<FlowProblem>, forward: bool, images: &[Point]) -> Result<Self, DiffeoError> {
        let displacement = displacement_of(problem.grid(), images)?;
        Ok(Self { displacement, support_box: None, evaluation: Evaluation::Flow(problem, forward) })
    }

    pub fn grid(&self) -> &Grid {
        self.displacement.grid()
    }

    pub fn displacement(&self) -> &VectorField {
        &self.displacement
    }

    pub fn support_box(&self) -> Option<&BoxDomain> {
        self.support_box.as_ref()
    }

    /// Replaces the advertised support box after checking it.
    pub fn with_support_box(mut self, support_box: BoxDomain) -> Result<Self, DiffeoError> {
        self.support_box = Some(support_box);
        self.check_support()?;
        Ok(self)
    }

    pub fn is_identity(&self) -> bool {
        let exact = match &self.evaluation {
            Evaluation::Interpolated => true,
            Evaluation::Flow(problem, _) => !problem.has_flux(),
            _ => false,
        };
        exact && self.displacement.max_norm() == 0.0
    }

    fn check_support(&self) -> Result<(), DiffeoError> {
        if let Some(b) = &self.support_box {
            let g = self.grid();
            if let Some(node) = (0..g.len()).find(|&i| !self.displacement.is_zero_at(i) && !b.contains(&g.node_at(i))) {
                return Err(DiffeoError::SupportViolation { node });
            }
        }
        Ok(())
    }

    /// Image of node `idx`.
    pub fn node_image(&self, idx: usize) -> Point {
        let g = self.grid();
        let mut p = g.node_at(idx);
        let u = self.displacement.at(idx);
        for a in 0..g.n_dim() {
            p[a] += u[a];
        }
        p
    }

    /// Image of an arbitrary point of the grid box.
    pub fn apply(&self, p: &Point) -> Result<Point, DiffeoError> {
        let g = self.grid();
        if p[..g.n_dim()].iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinitePoint(p[..g.n_dim()].to_vec()).into());
        }
        match &self.evaluation {
            Evaluation::Interpolated => Ok(self.forward(p)),
            Evaluation::InverseOf(inner, settings) => {
                inner.solve_preimage(p, settings).map_err(|(iterate, residual)| DiffeoError::InversionFailed {
                    node: usize::MAX,
                    iterate: iterate[..g.n_dim()].to_vec(),
                    residual,
                })
            }
            Evaluation::Flow(problem, forward) => {
                problem.map_point(p, *forward).map_err(|e| DiffeoError::Flow(e.to_string()))
            }
            Evaluation::Composite(outer, inner) => outer.apply(&inner.apply(p)?),
        }
    }

    fn forward(&self, p: &Point) -> Point {
        let g = self.grid();
        let u = self.displacement.sample_smooth(&g.locate(p));
        let mut q = *p;
        for a in 0..g.n_dim() {
            q[a] += u[a];
        }
        q
    }

    /// Solves `self(x) = y` by fixed-point iteration, switching to Newton
    /// steps once the residual stops shrinking fast.
    fn solve_preimage(&self, y: &Point, settings: &InversionSettings) -> Result<Point, (Point, f64)> {
        let g = self.grid();
        let n = g.n_dim();
        let bounds = g.bounds();
        let mut x = *y;
        let mut best = (x, f64::INFINITY);
        let mut last = f64::INFINITY;
        let mut newton = false;
        for _ in 0..=settings.max_iter {
            let u = self.displacement.sample_smooth(&g.locate(&x));
            let mut r = [0.0; MAX_DIM];
            for a in 0..n {
                r[a] = x[a] + u[a] - y[a];
            }
            let norm = r[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < best.1 {
                best = (x, norm);
            }
            if norm <= settings.tol {
                return Ok(x);
            }
            if norm > 0.5 * last {
                newton = true;
            }
            last = norm;
            let mut step = r;
            if newton {
                let jac = self.smooth_jacobian(&x, &bounds);
                if let Some(dx) = solve_small(&jac, &r, n) {
                    step = dx;
                }
            }
            for a in 0..n {
                x[a] -= step[a];
            }
            x = bounds.clamp(&x);
        }
        if best.1 <= 10.0 * settings.tol {
            Ok(best.0)
        } else {
            Err(best)
        }
    }

    /// `∇φ` of the smooth interpolant by central differences, one-sided at the box faces.
    fn smooth_jacobian(&self, x: &Point, bounds: &BoxDomain) -> [[f64; MAX_DIM]; MAX_DIM] {
        let g = self.grid();
        let n = g.n_dim();
        let mut jac = [[0.0; MAX_DIM]; MAX_DIM];
        for b in 0..n {
            let delta = 1e-6 * g.spacing(b);
            let (mut lo, mut hi) = (*x, *x);
            lo[b] = (x[b] - delta).max(bounds.lower()[b]);
            hi[b] = (x[b] + delta).min(bounds.upper()[b]);
            let (ul, uh) =
                (self.displacement.sample_smooth(&g.locate(&lo)), self.displacement.sample_smooth(&g.locate(&hi)));
            for a in 0..n {
                jac[a][b] = (uh[a] - ul[a]) / (hi[b] - lo[b]) + if a == b { 1.0 } else { 0.0 };
            }
        }
        jac
    }

    /// Finite-difference `det∇φ` at the nodes. For an inverted map `ψ = φ⁻¹`
    /// this is `1 / (det∇φ ∘ ψ)`.
    pub fn jacobian_determinant(&self) -> Result<ScalarField, DiffeoError> {
        match &self.evaluation {
            Evaluation::Interpolated | Evaluation::Flow(..) | Evaluation::Composite(..) => {
                Ok(displacement_jacobian(&self.displacement))
            }
            Evaluation::InverseOf(inner, _) => {
                let det = inner.jacobian_determinant()?;
                let g = *self.grid();
                let values =
                    (0..g.len()).into_par_iter().map(|i| 1.0 / det.sample(&g.locate(&self.node_image(i)))).collect();
                Ok(ScalarField::new(g, values)?)
            }
        }
    }

    /// Smallest node Jacobian determinant.
    pub fn min_jacobian(&self) -> Result<f64, DiffeoError> {
        Ok(self.jacobian_determinant()?.min())
    }

    /// Largest displacement norm over nodes accepted by `select`.
    pub fn max_displacement_where(&self, select: impl Fn(&Point) -> bool) -> f64 {
        let g = self.grid();
        (0..g.len())
            .filter(|&i| select(&g.node_at(i)))
            .map(|i| {
                let u = self.displacement.at(i);
                u[..g.n_dim()].iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Sets the displacement to exactly zero at nodes accepted by `select`.
    /// The result is evaluated by interpolation of its node samples.
    pub fn zero_where(&self, select: impl Fn(&Point) -> bool) -> Self {
        let g = *self.grid();
        let comps = self
            .displacement
            .components()
            .iter()
            .map(|c| c.iter().enumerate().map(|(i, &v)| if select(&g.node_at(i)) { 0.0 } else { v }).collect())
            .collect();
        Self {
            displacement: VectorField::new(g, comps).expect("shape preserved"),
            support_box: self.support_box,
            evaluation: Evaluation::Interpolated,
        }
    }

    /// Fails on the first node with `det∇φ ≤ 0`.
    pub fn check_orientation(&self) -> Result<(), DiffeoError> {
        let det = self.jacobian_determinant()?;
        match det.values().iter().position(|&v| !(v > 0.0)) {
            Some(node) => Err(DiffeoError::NotOrientationPreserving { node, value: det.values()[node] }),
            None => Ok(()),
        }
    }
}

fn solve_small(m: &[[f64; MAX_DIM]; MAX_DIM], r: &[f64; MAX_DIM], n: usize) -> Option<[f64; MAX_DIM]> {
    let det = determinant(m, n);
    if det.abs() < 1e-300 || !det.is_finite() {
        return None;
    }
    // Cramer's rule
    let mut out = [0.0; MAX_DIM];
    for c in 0..n {
        let mut mc = *m;
        for row in 0..n {
            mc[row][c] = r[row];
        }
        out[c] = determinant(&mc, n) / det;
    }
    Some(out)
}

fn clamp_image(grid: &Grid, node: usize, p: Point) -> Result<Point, DiffeoError> {
    let bounds = grid.bounds();
    let excess = bounds.distance_to(&p);
    let limit = CLAMP_TOL * (0..grid.n_dim()).map(|a| grid.extent(a)).fold(0.0, f64::max);
    if excess > limit {
        return Err(DiffeoError::OutsideBox { node, excess });
    }
    Ok(if excess > 0.0 { bounds.clamp(&p) } else { p })
}

fn hull(a: Option<&BoxDomain>, b: Option<&BoxDomain>) -> Option<BoxDomain> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.hull(b)),
        _ => None,
    }
}

fn displacement_of(g: &Grid, images: &[Point]) -> Result<VectorField, FieldError> {
    let comps =
        (0..g.n_dim()).map(|a| images.iter().enumerate().map(|(i, p)| p[a] - g.node_at(i)[a]).collect()).collect();
    VectorField::new(*g, comps)
}

/// `outer ∘ inner`, sampled at the nodes and evaluated pointwise elsewhere.
pub fn compose(outer: &Diffeomorphism, inner: &Diffeomorphism) -> Result<Diffeomorphism, DiffeoError> {
    let g = *inner.grid();
    if g != *outer.grid() {
        return Err(DiffeoError::GridMismatch);
    }
    if outer.is_identity() {
        return Ok(inner.clone());
    }
    if inner.is_identity() {
        return Ok(outer.clone());
    }
    let images: Vec<Point> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let y = clamp_image(&g, i, inner.node_image(i))?;
            if y == g.node_at(i) {
                return Ok(outer.node_image(i));
            }
            outer.apply(&y).map_err(|e| match e {
                DiffeoError::InversionFailed { iterate, residual, .. } => {
                    DiffeoError::InversionFailed { node: i, iterate, residual }
                }
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;
    let support_box = hull(outer.support_box(), inner.support_box());
    let mut phi = Diffeomorphism::from_displacement(displacement_of(&g, &images)?, support_box)?;
    phi.evaluation = Evaluation::Composite(Arc::new(outer.clone()), Arc::new(inner.clone()));
    Ok(phi)
}

/// `φ⁻¹`. Flows are run backwards and composites are inverted factor by
/// factor; other maps are solved at every node, and off-node evaluation
/// solves `φ(x) = y` again.
pub fn invert(phi: &Diffeomorphism, settings: &InversionSettings) -> Result<Diffeomorphism, DiffeoError> {
    match &phi.evaluation {
        Evaluation::InverseOf(inner, _) => return Ok((**inner).clone()),
        Evaluation::Flow(problem, forward) => {
            let images = problem.node_images(!forward).map_err(|e| DiffeoError::Flow(e.to_string()))?;
            let mut psi = Diffeomorphism::from_flow(problem.clone(), !forward, &images)?;
            psi.support_box = phi.support_box;
            return Ok(psi);
        }
        Evaluation::Composite(outer, inner) => return compose(&invert(inner, settings)?, &invert(outer, settings)?),
        Evaluation::Interpolated => {}
    }
    if phi.is_identity() {
        return Ok(phi.clone());
    }
    let g = *phi.grid();
    let n = g.n_dim();
    let pre: Vec<Point> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let y = g.node_at(i);
            if phi.displacement.is_zero_at(i) && phi.forward(&y) == y {
                return Ok(y);
            }
            phi.solve_preimage(&y, settings).map_err(|(iterate, residual)| DiffeoError::InversionFailed {
                node: i,
                iterate: iterate[..n].to_vec(),
                residual,
            })
        })
        .collect::<Result<_, _>>()?;
    let comps = (0..n).map(|a| pre.iter().enumerate().map(|(i, p)| p[a] - g.node_at(i)[a]).collect()).collect();
    Ok(Diffeomorphism {
        displacement: VectorField::new(g, comps)?,
        support_box: phi.support_box,
        evaluation: Evaluation::InverseOf(Arc::new(phi.clone()), *settings),
    })
}

/// `(g ∘ φ) · det∇φ` at the nodes.
pub fn pullback_density(g: &ScalarField, phi: &Diffeomorphism) -> Result<ScalarField, DiffeoError> {
    if g.grid() != phi.grid() {
        return Err(DiffeoError::GridMismatch);
    }
    let det = phi.jacobian_determinant()?;
    let grid = *g.grid();
    let values =
        (0..grid.len()).into_par_iter().map(|i| g.sample(&grid.locate(&phi.node_image(i))) * det.values()[i]).collect();
    Ok(ScalarField::new(grid, values)?)
}

/// Re-samples `φ` onto `to_grid`, with displacement exactly zero at every
/// node outside `from_box`.
pub fn extend_by_identity(
    phi: &Diffeomorphism,
    from_box: &BoxDomain,
    to_grid: &Grid,
) -> Result<Diffeomorphism, DiffeoError> {
    let src = phi.grid();
    let n = src.n_dim();
    if to_grid.n_dim() != n {
        return Err(DiffeoError::LatticeMismatch);
    }
    let comps: Vec<Vec<f64>> = if src.same_lattice(to_grid) {
        (0..n)
            .map(|a| {
                (0..to_grid.len())
                    .map(|i| {
                        let p = to_grid.node_at(i);
                        match src.index_of(&p) {
                            Some(k) if from_box.contains(&p) => phi.displacement.component(a)[src.linear_index(&k)],
                            _ => 0.0,
                        }
                    })
                    .collect()
            })
            .collect()
    } else {
        let mut comps = vec![vec![0.0; to_grid.len()]; n];
        for i in 0..to_grid.len() {
            let p = to_grid.node_at(i);
            if from_box.contains(&p) && src.bounds().contains(&p) {
                let u = phi.displacement.sample_smooth(&src.locate(&p));
                for a in 0..n {
                    comps[a][i] = u[a];
                }
            }
        }
        comps
    };
    let support = match phi.support_box() {
        Some(b) => Some(*b),
        None => Some(*from_box),
    };
    Diffeomorphism::from_displacement(VectorField::new(*to_grid, comps)?, support)
}
